use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use super::context::{encode_request, Context, ContextInner, NalOp};
use super::{CallbackInfo, Result, RpcError, Status};
use crate::nal::{NetAddress, OpToken};
use crate::wire::{encode_frame, Flags, MessageHeader, MessageKind, RpcId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Origin,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Created,
    Forwarded,
    Completed,
    Canceled,
    Received,
    Responded,
}

struct State {
    phase: Phase,
    status: Option<Status>,
    cookie: Option<u64>,
    input: Vec<u8>,
    output: Option<Vec<u8>>,
    bulk: Option<Vec<u8>>,
    no_response: bool,
    send_token: Option<OpToken>,
}

struct HandleInner {
    role: Role,
    rpc_id: RpcId,
    peer: NetAddress,
    ctx: Weak<ContextInner>,
    state: Mutex<State>,
}

pub(crate) struct HandleInit {
    pub peer: NetAddress,
    pub rpc_id: RpcId,
    pub cookie: u64,
    pub input: Vec<u8>,
    pub bulk: Option<Vec<u8>>,
    pub no_response: bool,
}

/// One call, seen from either side.
///
/// Origin handles go CREATED → FORWARDED → COMPLETED or CANCELED; target
/// handles go RECEIVED → RESPONDED. A handle is used once; make a new one
/// for the next call.
#[derive(Clone)]
pub struct Handle {
    inner: Arc<HandleInner>,
}

impl std::fmt::Debug for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.inner.state.lock();
        f.debug_struct("Handle")
            .field("role", &self.inner.role)
            .field("rpc_id", &self.inner.rpc_id)
            .field("peer", &self.inner.peer)
            .field("phase", &st.phase)
            .field("cookie", &st.cookie)
            .finish()
    }
}

impl Handle {
    pub(crate) fn origin(ctx: &Context, peer: NetAddress, rpc_id: RpcId) -> Self {
        Self::build(ctx, Role::Origin, peer, rpc_id, State {
            phase: Phase::Created,
            status: None,
            cookie: None,
            input: Vec::new(),
            output: None,
            bulk: None,
            no_response: false,
            send_token: None,
        })
    }

    pub(crate) fn target(ctx: &Context, init: HandleInit) -> Self {
        Self::build(ctx, Role::Target, init.peer, init.rpc_id, State {
            phase: Phase::Received,
            status: None,
            cookie: Some(init.cookie),
            input: init.input,
            output: None,
            bulk: init.bulk,
            no_response: init.no_response,
            send_token: None,
        })
    }

    fn build(ctx: &Context, role: Role, peer: NetAddress, rpc_id: RpcId, state: State) -> Self {
        Self {
            inner: Arc::new(HandleInner {
                role,
                rpc_id,
                peer,
                ctx: Arc::downgrade(&ctx.inner),
                state: Mutex::new(state),
            }),
        }
    }

    pub fn role(&self) -> Role {
        self.inner.role
    }

    pub fn rpc_id(&self) -> RpcId {
        self.inner.rpc_id
    }

    pub fn peer(&self) -> &NetAddress {
        &self.inner.peer
    }

    pub fn phase(&self) -> Phase {
        self.inner.state.lock().phase
    }

    /// Terminal status of an origin call, once known.
    pub fn status(&self) -> Option<Status> {
        self.inner.state.lock().status
    }

    /// Assigned at forward on the origin; echoed from the request on the target.
    pub fn cookie(&self) -> Option<u64> {
        self.inner.state.lock().cookie
    }

    pub fn context(&self) -> Option<Context> {
        self.inner.ctx.upgrade().map(|inner| Context { inner })
    }

    fn live_context(&self) -> Result<Context> {
        self.context().ok_or(RpcError::ContextClosed)
    }

    /// Request input, on a target handle that has not yet responded.
    pub fn input(&self) -> Result<Vec<u8>> {
        let st = self.inner.state.lock();
        if self.inner.role != Role::Target || st.phase != Phase::Received {
            return Err(RpcError::InvalidState("input is readable only on a received target handle"));
        }
        Ok(st.input.clone())
    }

    /// Response output, on an origin handle completed with OK.
    pub fn output(&self) -> Result<Vec<u8>> {
        let st = self.inner.state.lock();
        if self.inner.role != Role::Origin || st.phase != Phase::Completed || st.status != Some(Status::Ok) {
            return Err(RpcError::InvalidState("output is readable only on an origin handle completed OK"));
        }
        Ok(st.output.clone().unwrap_or_default())
    }

    /// Serialized bulk descriptor attached by the origin, if any.
    pub fn bulk_descriptor(&self) -> Option<Vec<u8>> {
        self.inner.state.lock().bulk.clone()
    }

    /// True on a target handle whose call was declared without a response.
    pub fn no_response(&self) -> bool {
        self.inner.state.lock().no_response
    }

    /// Sends the request. `callback` runs later from trigger with the
    /// terminal status; `input` is copied now.
    pub fn forward<F>(&self, input: &[u8], bulk: Option<&[u8]>, callback: F) -> Result<()>
    where
        F: FnOnce(&CallbackInfo) + Send + 'static,
    {
        if self.inner.role != Role::Origin {
            return Err(RpcError::InvalidState("forward on a target handle"));
        }
        let ctx = self.live_context()?;
        let class = ctx.class().clone();
        let limit = class.eager_limit();
        let payload = encode_request(input, bulk);
        if payload.len() > limit {
            return Err(RpcError::Oversize {
                len: payload.len(),
                limit,
            });
        }
        let response_expected = class
            .registration(self.inner.rpc_id)
            .is_none_or(|r| r.response_expected);
        let mut flags = Flags::NONE;
        if !response_expected {
            flags = flags | Flags::NO_RESPONSE;
        }
        if bulk.is_some() {
            flags = flags | Flags::HAS_BULK;
        }
        let cookie = ctx.next_id();
        {
            let mut st = self.inner.state.lock();
            if st.phase != Phase::Created {
                return Err(RpcError::InvalidState("forward on a handle that is not CREATED"));
            }
            st.phase = Phase::Forwarded;
            st.cookie = Some(cookie);
            st.input = input.to_vec();
            st.bulk = bulk.map(<[u8]>::to_vec);
        }
        let frame = encode_frame(
            MessageHeader::new(MessageKind::Request, self.inner.rpc_id, cookie, flags, 0),
            &payload,
        )?;
        ctx.register_call(cookie, self.clone(), Box::new(callback), response_expected);
        let tag = ctx.track(NalOp::RequestSend { cookie });
        match class.endpoint().send_unexpected(&self.inner.peer, frame, tag) {
            Ok(token) => {
                self.inner.state.lock().send_token = Some(token);
                Ok(())
            }
            Err(e) => {
                ctx.untrack(tag);
                ctx.unregister_call(cookie);
                let mut st = self.inner.state.lock();
                st.phase = Phase::Created;
                st.cookie = None;
                Err(e.into())
            }
        }
    }

    /// Best-effort cancel of a forwarded call. The callback fires with
    /// CANCELED unless another terminal status got there first.
    pub fn cancel(&self) -> Result<()> {
        let (cookie, token) = {
            let st = self.inner.state.lock();
            if self.inner.role != Role::Origin || st.phase != Phase::Forwarded {
                return Err(RpcError::InvalidState("cancel on a handle that is not FORWARDED"));
            }
            (st.cookie.expect("forwarded handles carry a cookie"), st.send_token)
        };
        let ctx = self.live_context()?;
        if ctx.retire(cookie, Status::Canceled, None) {
            if let Some(token) = token {
                let _ = ctx.class().endpoint().cancel(token);
            }
        }
        Ok(())
    }

    /// Sends the response. `callback` runs from trigger once the send completes.
    pub fn respond<F>(&self, output: &[u8], callback: F) -> Result<()>
    where
        F: FnOnce(&CallbackInfo) + Send + 'static,
    {
        if self.inner.role != Role::Target {
            return Err(RpcError::InvalidState("respond on an origin handle"));
        }
        let ctx = self.live_context()?;
        let class = ctx.class().clone();
        let cookie = {
            let mut st = self.inner.state.lock();
            if st.phase != Phase::Received {
                return Err(RpcError::InvalidState("respond on a handle that is not RECEIVED"));
            }
            if st.no_response {
                return Err(RpcError::InvalidState("call was sent without expecting a response"));
            }
            let limit = class.eager_limit();
            if output.len() > limit {
                return Err(RpcError::Oversize {
                    len: output.len(),
                    limit,
                });
            }
            st.phase = Phase::Responded;
            st.cookie.expect("target handles carry a cookie")
        };
        let frame = encode_frame(
            MessageHeader::new(MessageKind::Response, self.inner.rpc_id, cookie, Flags::NONE, 0),
            output,
        )?;
        let tag = ctx.track(NalOp::ResponseSend {
            handle: self.clone(),
            callback: Box::new(callback),
        });
        if let Err(e) = class.endpoint().send_unexpected(&self.inner.peer, frame, tag) {
            ctx.untrack(tag);
            self.inner.state.lock().phase = Phase::Received;
            return Err(e.into());
        }
        Ok(())
    }

    pub(crate) fn finish(&self, status: Status, output: Option<Vec<u8>>) {
        let mut st = self.inner.state.lock();
        st.phase = if status == Status::Canceled {
            Phase::Canceled
        } else {
            Phase::Completed
        };
        st.status = Some(status);
        st.output = output;
        st.send_token = None;
    }
}
