//! Recording plugin: a loop transport in its own fabric namespace that logs
//! every contract call made on it. Used to check that the layers above the
//! NAL stay within the plugin contract.

use std::sync::{Arc, LazyLock};
use std::time::Duration;

use parking_lot::Mutex;

use super::loopback::LoopTransport;
use super::{
    register_plugin, Endpoint, MemRegion, MemoryKey, NalCompletion, NalConfig, NetAddress,
    OpToken, Permission, RemoteAccess, Result, Tag, Transport,
};

pub const PLUGIN: &str = "mock";

/// Every operation of the plugin contract.
pub const CONTRACT_OPS: [&str; 9] = [
    "send_unexpected",
    "recv_unexpected",
    "mem_expose",
    "mem_unexpose",
    "get",
    "put",
    "progress",
    "cancel",
    "close",
];

/// Shared, append-only record of contract calls.
#[derive(Debug, Default)]
pub struct CallLog {
    calls: Mutex<Vec<&'static str>>,
}

impl CallLog {
    fn record(&self, op: &'static str) {
        self.calls.lock().push(op);
    }

    pub fn calls(&self) -> Vec<&'static str> {
        self.calls.lock().clone()
    }

    pub fn count(&self, op: &str) -> usize {
        self.calls.lock().iter().filter(|c| **c == op).count()
    }
}

static LOG: LazyLock<Arc<CallLog>> = LazyLock::new(Arc::default);

/// Registers the `mock` plugin and returns the process-wide call log.
pub fn install() -> Arc<CallLog> {
    register_plugin(
        PLUGIN,
        Arc::new(|locator: Option<&str>, cfg: &NalConfig| listen(locator, cfg, LOG.clone())),
    )
    .expect("valid plugin name");
    LOG.clone()
}

/// Opens a recording endpoint logging into `log`.
pub fn listen(locator: Option<&str>, config: &NalConfig, log: Arc<CallLog>) -> Result<Endpoint> {
    let (inner, stats, address) = LoopTransport::bind(PLUGIN, locator, config)?;
    Ok(Endpoint::new(
        PLUGIN,
        Some(address),
        config.clone(),
        stats,
        Box::new(Recording { inner, log }),
    ))
}

struct Recording {
    inner: LoopTransport,
    log: Arc<CallLog>,
}

impl Transport for Recording {
    fn send_unexpected(&self, dest: &NetAddress, msg: Vec<u8>, tag: Tag) -> Result<OpToken> {
        self.log.record("send_unexpected");
        self.inner.send_unexpected(dest, msg, tag)
    }

    fn recv_unexpected(&self) -> Result<Option<NalCompletion>> {
        self.log.record("recv_unexpected");
        self.inner.recv_unexpected()
    }

    fn mem_expose(&self, region: MemRegion, perm: Permission) -> Result<MemoryKey> {
        self.log.record("mem_expose");
        self.inner.mem_expose(region, perm)
    }

    fn mem_unexpose(&self, key: MemoryKey) -> Result<()> {
        self.log.record("mem_unexpose");
        self.inner.mem_unexpose(key)
    }

    fn get(&self, op: RemoteAccess) -> Result<OpToken> {
        self.log.record("get");
        self.inner.get(op)
    }

    fn put(&self, op: RemoteAccess) -> Result<OpToken> {
        self.log.record("put");
        self.inner.put(op)
    }

    fn progress(&self, timeout: Duration, out: &mut Vec<NalCompletion>) -> Result<usize> {
        self.log.record("progress");
        self.inner.progress(timeout, out)
    }

    fn cancel(&self, token: OpToken) -> Result<()> {
        self.log.record("cancel");
        self.inner.cancel(token)
    }

    fn close(&self) -> Vec<NalCompletion> {
        self.log.record("close");
        self.inner.close()
    }
}
