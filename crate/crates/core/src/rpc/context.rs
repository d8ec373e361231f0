use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::class::RpcClass;
use super::handle::{Handle, HandleInit};
use super::{Callback, CallbackInfo, CallbackOp, Request, Result, RpcError, Status};
use crate::bulk::Transfer;
use crate::nal::{NalCompletion, NalError, NetAddress, Tag};
use crate::wire::{
    encode_frame, split_frame, Flags, MessageHeader, MessageKind, ProcContext, RpcId,
};

const CONTEXT_SHIFT: u32 = 48;

pub(crate) fn context_of(id: u64) -> u16 {
    (id >> CONTEXT_SHIFT) as u16
}

thread_local! {
    static TRIGGER_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// True while the current thread is executing callbacks inside [`Context::trigger`].
pub fn in_trigger() -> bool {
    TRIGGER_DEPTH.with(|d| d.get() > 0)
}

struct TriggerGuard;

impl TriggerGuard {
    fn enter() -> Self {
        TRIGGER_DEPTH.with(|d| d.set(d.get() + 1));
        TriggerGuard
    }
}

impl Drop for TriggerGuard {
    fn drop(&mut self) {
        TRIGGER_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// A queued callback and the outcome it reports.
pub struct CompletionEvent {
    info: CallbackInfo,
    callback: Callback,
}

impl CompletionEvent {
    pub(crate) fn new(info: CallbackInfo, callback: Callback) -> Self {
        Self { info, callback }
    }

    pub fn status(&self) -> Status {
        self.info.status
    }

    pub fn op(&self) -> CallbackOp {
        self.info.op
    }

    fn run(self) {
        (self.callback)(&self.info)
    }
}

/// What a NAL tag stands for.
pub(crate) enum NalOp {
    /// REQUEST send for the origin call with this cookie.
    RequestSend { cookie: u64 },
    /// RESPONSE send; the callback fires when it completes.
    ResponseSend { handle: Handle, callback: Callback },
    /// Fire-and-forget ERROR frame.
    ErrorSend,
    /// One piece of a bulk transfer.
    BulkPiece(Arc<Transfer>),
}

struct InFlight {
    handle: Handle,
    callback: Callback,
    awaiting_response: bool,
}

/// Diagnostic counters of one context.
#[derive(Debug, Default)]
pub struct ContextStats {
    pub dropped_responses: AtomicU64,
    pub malformed_frames: AtomicU64,
    pub errors_sent: AtomicU64,
    pub requests_received: AtomicU64,
    pub events_enqueued: AtomicU64,
    pub events_executed: AtomicU64,
}

impl ContextStats {
    pub fn dropped_responses(&self) -> u64 {
        self.dropped_responses.load(Ordering::SeqCst)
    }

    pub fn events_executed(&self) -> u64 {
        self.events_executed.load(Ordering::SeqCst)
    }
}

pub(crate) struct ContextInner {
    id: u16,
    pub(crate) class: RpcClass,
    queue: Mutex<VecDeque<CompletionEvent>>,
    next_seq: AtomicU64,
    inflight: Mutex<HashMap<u64, InFlight>>,
    nal_ops: Mutex<HashMap<Tag, NalOp>>,
    closed: AtomicBool,
    stats: ContextStats,
}

/// A completion queue bound to a class.
#[derive(Clone)]
pub struct Context {
    pub(crate) inner: Arc<ContextInner>,
}

impl std::fmt::Debug for Context {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Context").field("id", &self.inner.id).finish()
    }
}

impl Context {
    pub(crate) fn new(class: RpcClass, id: u16) -> Self {
        Self {
            inner: Arc::new(ContextInner {
                id,
                class,
                queue: Mutex::new(VecDeque::new()),
                next_seq: AtomicU64::new(1),
                inflight: Mutex::new(HashMap::new()),
                nal_ops: Mutex::new(HashMap::new()),
                closed: AtomicBool::new(false),
                stats: ContextStats::default(),
            }),
        }
    }

    pub fn class(&self) -> &RpcClass {
        &self.inner.class
    }

    pub fn stats(&self) -> &ContextStats {
        &self.inner.stats
    }

    /// Origin calls still waiting for a terminal status.
    pub fn inflight_count(&self) -> usize {
        self.inner.inflight.lock().len()
    }

    pub fn queue_len(&self) -> usize {
        self.inner.queue.lock().len()
    }

    fn check_open(&self) -> Result<()> {
        if self.inner.closed.load(Ordering::SeqCst) {
            Err(RpcError::ContextClosed)
        } else {
            Ok(())
        }
    }

    /// Cookie or tag unique across all contexts of the class.
    pub(crate) fn next_id(&self) -> u64 {
        (u64::from(self.inner.id) << CONTEXT_SHIFT) | self.inner.next_seq.fetch_add(1, Ordering::SeqCst)
    }

    pub(crate) fn track(&self, op: NalOp) -> Tag {
        let tag = self.next_id();
        self.inner.nal_ops.lock().insert(tag, op);
        tag
    }

    pub(crate) fn untrack(&self, tag: Tag) -> Option<NalOp> {
        self.inner.nal_ops.lock().remove(&tag)
    }

    pub(crate) fn enqueue(&self, event: CompletionEvent) {
        self.inner.queue.lock().push_back(event);
        self.inner.stats.events_enqueued.fetch_add(1, Ordering::SeqCst);
    }

    /// ORIGIN handle in CREATED state; nothing is sent until forward.
    pub fn create_handle(&self, dest: &NetAddress, id: RpcId) -> Result<Handle> {
        self.check_open()?;
        Ok(Handle::origin(self, dest.clone(), id))
    }

    pub(crate) fn register_call(&self, cookie: u64, handle: Handle, callback: Callback, awaiting_response: bool) {
        self.inner.inflight.lock().insert(
            cookie,
            InFlight {
                handle,
                callback,
                awaiting_response,
            },
        );
    }

    pub(crate) fn unregister_call(&self, cookie: u64) -> Option<Callback> {
        self.inner.inflight.lock().remove(&cookie).map(|f| f.callback)
    }

    /// Retires an in-flight cookie exactly once, queueing its callback.
    pub(crate) fn retire(&self, cookie: u64, status: Status, output: Option<Vec<u8>>) -> bool {
        let Some(call) = self.inner.inflight.lock().remove(&cookie) else {
            return false;
        };
        call.handle.finish(status, output);
        self.enqueue(CompletionEvent::new(
            CallbackInfo {
                op: CallbackOp::Forward,
                status,
                handle: Some(call.handle),
            },
            call.callback,
        ));
        true
    }

    /// Drives the network for at most `timeout` and converts what finished
    /// into completion events. Never runs user callbacks. Returns the number
    /// of events queued.
    pub fn progress(&self, timeout: Duration) -> Result<usize> {
        self.check_open()?;
        let before = self.total_enqueued();
        let endpoint = self.inner.class.endpoint().clone();
        let wait = if self.queue_len() > 0 { Duration::ZERO } else { timeout };
        let mut done = Vec::new();
        endpoint.progress(wait, &mut done).map_err(closed_to_context)?;
        for c in done {
            self.route_completion(c);
        }
        while let Some(msg) = endpoint.recv_unexpected().map_err(closed_to_context)? {
            self.on_unexpected(msg);
        }
        Ok((self.total_enqueued() - before) as usize)
    }

    fn total_enqueued(&self) -> u64 {
        self.inner.stats.events_enqueued.load(Ordering::SeqCst)
    }

    /// Runs up to `max` queued callbacks, in FIFO order, on this thread.
    pub fn trigger(&self, max: usize) -> Result<usize> {
        if self.inner.closed.load(Ordering::SeqCst) && self.queue_len() == 0 {
            return Err(RpcError::ContextClosed);
        }
        let mut ran = 0;
        while ran < max {
            let Some(event) = self.inner.queue.lock().pop_front() else {
                break;
            };
            {
                let _guard = TriggerGuard::enter();
                event.run();
            }
            self.inner.stats.events_executed.fetch_add(1, Ordering::SeqCst);
            ran += 1;
        }
        Ok(ran)
    }

    /// Posts a call and returns a request that can be tested or waited on.
    pub fn request_post(&self, dest: &NetAddress, id: RpcId, input: &[u8]) -> Result<Request> {
        Request::post(self, dest, id, input, None)
    }

    pub fn request_post_with_bulk(&self, dest: &NetAddress, id: RpcId, input: &[u8], bulk: &[u8]) -> Result<Request> {
        Request::post(self, dest, id, input, Some(bulk))
    }

    /// Closes the context: in-flight calls complete as CANCELED; queued
    /// events can still be triggered.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let cookies: Vec<u64> = self.inner.inflight.lock().keys().copied().collect();
        for c in cookies {
            self.retire(c, Status::Canceled, None);
        }
    }

    fn route_completion(&self, c: NalCompletion) {
        let owner = context_of(c.tag);
        if owner == self.inner.id {
            self.inner.on_nal_completion(self, c);
        } else if let Some(ctx) = self.inner.class.context(owner) {
            ctx.inner.on_nal_completion(&ctx, c);
        }
    }

    fn send_error(&self, dest: &NetAddress, header: &MessageHeader, status: Status) {
        let frame = encode_frame(
            MessageHeader::new(MessageKind::Error, header.rpc_id, header.cookie, Flags::NONE, 0),
            &[status as u8],
        )
        .expect("one byte payload");
        let tag = self.track(NalOp::ErrorSend);
        if self
            .inner
            .class
            .endpoint()
            .send_unexpected(dest, frame, tag)
            .is_err()
        {
            self.untrack(tag);
        } else {
            self.inner.stats.errors_sent.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn on_unexpected(&self, msg: NalCompletion) {
        let Some(source) = msg.source else {
            return;
        };
        let Ok((header, payload)) = split_frame(&msg.payload) else {
            self.inner.stats.malformed_frames.fetch_add(1, Ordering::SeqCst);
            return;
        };
        match header.kind {
            MessageKind::Request => self.on_request(source, header, payload),
            MessageKind::Response => self.on_reply(header.cookie, Status::Ok, Some(payload.to_vec())),
            MessageKind::Error => {
                let status = payload
                    .first()
                    .and_then(|b| Status::from_u8(*b))
                    .unwrap_or(Status::DecodeError);
                self.on_reply(header.cookie, status, None);
            }
            _ => {
                self.inner.stats.malformed_frames.fetch_add(1, Ordering::SeqCst);
            }
        }
    }

    fn on_reply(&self, cookie: u64, status: Status, output: Option<Vec<u8>>) {
        let owner = context_of(cookie);
        let retired = if owner == self.inner.id {
            self.retire(cookie, status, output)
        } else {
            self.inner
                .class
                .context(owner)
                .is_some_and(|ctx| ctx.retire(cookie, status, output))
        };
        if !retired {
            self.inner.stats.dropped_responses.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn on_request(&self, source: NetAddress, header: MessageHeader, payload: &[u8]) {
        self.inner.stats.requests_received.fetch_add(1, Ordering::SeqCst);
        let no_response = header.flags.contains(Flags::NO_RESPONSE);
        let decoded = decode_request(payload);
        let Ok((input, bulk)) = decoded else {
            if !no_response {
                self.send_error(&source, &header, Status::DecodeError);
            }
            return;
        };
        let handler = self
            .inner
            .class
            .registration(header.rpc_id)
            .and_then(|r| r.handler);
        let Some(handler) = handler else {
            if !no_response {
                self.send_error(&source, &header, Status::NoSuchRpc);
            }
            return;
        };
        let bulk = header.flags.contains(Flags::HAS_BULK).then_some(bulk);
        let handle = Handle::target(
            self,
            HandleInit {
                peer: source,
                rpc_id: header.rpc_id,
                cookie: header.cookie,
                input,
                bulk,
                no_response,
            },
        );
        self.enqueue(CompletionEvent::new(
            CallbackInfo {
                op: CallbackOp::Handler,
                status: Status::Ok,
                handle: Some(handle),
            },
            Box::new(move |info: &CallbackInfo| {
                if let Some(h) = &info.handle {
                    handler(h.clone())
                }
            }),
        ));
    }
}

impl ContextInner {
    pub(crate) fn on_nal_completion(&self, ctx: &Context, c: NalCompletion) {
        let Some(op) = ctx.untrack(c.tag) else {
            return;
        };
        let status = Status::from(c.status);
        match op {
            NalOp::RequestSend { cookie } => {
                let awaiting = self
                    .inflight
                    .lock()
                    .get(&cookie)
                    .map(|f| f.awaiting_response);
                match awaiting {
                    Some(_) if !status.is_ok() => {
                        ctx.retire(cookie, status, None);
                    }
                    Some(false) => {
                        ctx.retire(cookie, Status::Ok, None);
                    }
                    _ => {}
                }
            }
            NalOp::ResponseSend { handle, callback } => ctx.enqueue(CompletionEvent::new(
                CallbackInfo {
                    op: CallbackOp::Respond,
                    status,
                    handle: Some(handle),
                },
                callback,
            )),
            NalOp::ErrorSend => {}
            NalOp::BulkPiece(transfer) => transfer.piece_done(ctx, status),
        }
    }
}

fn closed_to_context(e: NalError) -> RpcError {
    match e {
        NalError::Closed => RpcError::ContextClosed,
        other => RpcError::Nal(other),
    }
}

/// REQUEST payload: input_len(4) ‖ input ‖ bulk_len(4) ‖ bulk.
pub(crate) fn encode_request(input: &[u8], bulk: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + input.len() + bulk.map_or(0, <[u8]>::len));
    out.extend_from_slice(&(input.len() as u32).to_le_bytes());
    out.extend_from_slice(input);
    let bulk = bulk.unwrap_or(&[]);
    out.extend_from_slice(&(bulk.len() as u32).to_le_bytes());
    out.extend_from_slice(bulk);
    out
}

pub(crate) fn decode_request(payload: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut ctx = ProcContext::decoder(payload);
    let mut input = Vec::new();
    let mut bulk = Vec::new();
    ctx.proc_bytes(&mut input)?;
    ctx.proc_bytes(&mut bulk)?;
    if ctx.remaining() != 0 {
        return Err(RpcError::Wire(crate::wire::WireError::FrameLength {
            declared: ctx.position(),
            actual: payload.len(),
        }));
    }
    Ok((input, bulk))
}
