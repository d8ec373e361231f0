use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{Context, Handle, Result, RpcError, Status};
use crate::nal::NetAddress;
use crate::wire::RpcId;

const WAIT_SLICE: Duration = Duration::from_millis(10);

/// Post/test/wait wrapper over a single origin call.
#[derive(Debug)]
pub struct Request {
    ctx: Context,
    handle: Handle,
    result: Arc<Mutex<Option<Status>>>,
}

impl Request {
    pub(crate) fn post(
        ctx: &Context,
        dest: &NetAddress,
        id: RpcId,
        input: &[u8],
        bulk: Option<&[u8]>,
    ) -> Result<Self> {
        let handle = ctx.create_handle(dest, id)?;
        let result = Arc::new(Mutex::new(None));
        let slot = result.clone();
        handle.forward(input, bulk, move |info| {
            *slot.lock() = Some(info.status);
        })?;
        Ok(Self {
            ctx: ctx.clone(),
            handle,
            result,
        })
    }

    /// True once the completion callback has run. Does not drive progress.
    pub fn test(&self) -> bool {
        self.result.lock().is_some()
    }

    pub fn status(&self) -> Option<Status> {
        *self.result.lock()
    }

    /// Drives progress and trigger until the call completes or `timeout`
    /// elapses. On TIMEOUT the request stays live and can be waited on again.
    pub fn wait(&self, timeout: Duration) -> Result<Status> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(s) = self.status() {
                return Ok(s);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            self.ctx.progress(left.min(WAIT_SLICE))?;
            self.ctx.trigger(usize::MAX)?;
            if let Some(s) = self.status() {
                return Ok(s);
            }
            if Instant::now() >= deadline {
                return Err(RpcError::Timeout);
            }
        }
    }

    pub fn output(&self) -> Result<Vec<u8>> {
        self.handle.output()
    }

    pub fn handle(&self) -> &Handle {
        &self.handle
    }

    pub fn cancel(&self) -> Result<()> {
        self.handle.cancel()
    }
}
