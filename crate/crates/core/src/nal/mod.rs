//! Network abstraction layer.
//!
//! A transport plugin implements [`Transport`]: unexpected-message send and
//! receive, memory exposure, one-sided get/put, progress, cancel and close.
//! Everything above this layer talks to a plugin only through [`Endpoint`].
//!
//! Completions are never delivered inline. An initiating call returns an
//! [`OpToken`]; the matching [`NalCompletion`] surfaces from a later
//! [`Endpoint::progress`] call (or from [`Endpoint::close`]).

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::wire::{self, MessageKind, WireError, DEFAULT_EAGER_LIMIT, HEADER_LEN};

pub mod loopback;
pub mod mock;
mod region;
pub mod registry;
pub mod tcp;

pub use region::MemRegion;
pub(crate) use region::copy_between;
pub use registry::{open_endpoint, parse_address, register_plugin, PluginFactory};

/// Maximum number of buffered unexpected messages per endpoint.
pub const DEFAULT_UNEXPECTED_CAPACITY: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NalError {
    #[error("endpoint closed")]
    Closed,
    #[error("message of {len} bytes exceeds eager limit ({limit} bytes including header)")]
    Oversize { len: usize, limit: usize },
    #[error("cannot expose an empty region")]
    EmptyRegion,
    #[error("unknown or already completed operation token")]
    UnknownToken,
    #[error("unknown memory key {0:?}")]
    UnknownKey(MemoryKey),
    #[error("malformed address {0:?}")]
    BadUri(String),
    #[error("no plugin registered for {0:?}")]
    UnknownPlugin(String),
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error("bind failed: {0}")]
    BindFailed(String),
    #[error("address {0} is not served by plugin {1}")]
    WrongPlugin(String, String),
    #[error("malformed metadata frame: {0}")]
    MalformedFrame(#[from] WireError),
    #[error("local range {offset}+{length} exceeds region of {len} bytes")]
    LocalRange { offset: usize, length: usize, len: usize },
}

pub type Result<T, E = NalError> = std::result::Result<T, E>;

/// Transport-level address: `plugin://locator`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetAddress {
    plugin: String,
    locator: String,
}

impl NetAddress {
    /// Builds an address without consulting the plugin registry.
    pub fn new(plugin: impl Into<String>, locator: impl Into<String>) -> Self {
        Self {
            plugin: plugin.into(),
            locator: locator.into(),
        }
    }

    pub fn plugin(&self) -> &str {
        &self.plugin
    }

    pub fn locator(&self) -> &str {
        &self.locator
    }

    pub fn canonical(&self) -> String {
        format!("{}://{}", self.plugin, self.locator)
    }

    /// Grammar check only; see [`parse_address`] for the registry check.
    pub fn parse_syntax(uri: &str) -> Result<Self> {
        let (plugin, locator) = uri
            .split_once("://")
            .ok_or_else(|| NalError::BadUri(uri.to_string()))?;
        let plugin_ok = !plugin.is_empty()
            && plugin
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if !plugin_ok || locator.is_empty() {
            return Err(NalError::BadUri(uri.to_string()));
        }
        Ok(Self::new(plugin, locator))
    }
}

impl fmt::Display for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.plugin, self.locator)
    }
}

impl FromStr for NetAddress {
    type Err = NalError;
    fn from_str(s: &str) -> Result<Self> {
        parse_address(s)
    }
}

/// Remote-access token for an exposed region; never reused within an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemoryKey(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Permission {
    Read = 1,
    Write = 2,
    ReadWrite = 3,
}

impl Permission {
    pub fn can_read(self) -> bool {
        self as u8 & 1 != 0
    }

    pub fn can_write(self) -> bool {
        self as u8 & 2 != 0
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Permission::Read),
            2 => Some(Permission::Write),
            3 => Some(Permission::ReadWrite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Send,
    RecvUnexpected,
    Get,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum NalStatus {
    Ok = 0,
    Canceled = 1,
    Timeout = 2,
    TransportError = 3,
    RemoteError = 4,
}

impl NalStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(NalStatus::Ok),
            1 => Some(NalStatus::Canceled),
            2 => Some(NalStatus::Timeout),
            3 => Some(NalStatus::TransportError),
            4 => Some(NalStatus::RemoteError),
            _ => None,
        }
    }

    pub fn is_ok(self) -> bool {
        self == NalStatus::Ok
    }
}

/// Identifies an initiated operation for [`Endpoint::cancel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpToken(pub u64);

/// Opaque caller value echoed back in the completion.
pub type Tag = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NalCompletion {
    pub op: OpKind,
    pub status: NalStatus,
    pub token: Option<OpToken>,
    pub tag: Tag,
    /// Sender of a received unexpected message.
    pub source: Option<NetAddress>,
    /// Received unexpected message (header ‖ payload).
    pub payload: Vec<u8>,
}

impl NalCompletion {
    pub fn of(op: OpKind, status: NalStatus, token: OpToken, tag: Tag) -> Self {
        Self {
            op,
            status,
            token: Some(token),
            tag,
            source: None,
            payload: Vec::new(),
        }
    }

    pub fn received(source: NetAddress, payload: Vec<u8>) -> Self {
        Self {
            op: OpKind::RecvUnexpected,
            status: NalStatus::Ok,
            token: None,
            tag: 0,
            source: Some(source),
            payload,
        }
    }
}

/// Arguments of a one-sided get or put.
#[derive(Debug, Clone)]
pub struct RemoteAccess {
    pub remote: NetAddress,
    pub key: MemoryKey,
    pub remote_offset: u64,
    pub local: MemRegion,
    pub local_offset: usize,
    pub length: usize,
    pub tag: Tag,
}

#[derive(Debug, Clone)]
pub struct NalConfig {
    /// Maximum payload of a metadata frame, header excluded.
    pub eager_limit: usize,
    pub unexpected_capacity: usize,
}

impl Default for NalConfig {
    fn default() -> Self {
        Self {
            eager_limit: DEFAULT_EAGER_LIMIT,
            unexpected_capacity: DEFAULT_UNEXPECTED_CAPACITY,
        }
    }
}

impl NalConfig {
    pub fn with_eager_limit(eager_limit: usize) -> Self {
        Self {
            eager_limit,
            ..Self::default()
        }
    }

    /// Largest message accepted by `send_unexpected`.
    pub fn max_message(&self) -> usize {
        self.eager_limit + HEADER_LEN
    }
}

/// Counters shared between an endpoint and its transport.
#[derive(Debug, Default)]
pub struct NalStats {
    initiations: AtomicU64,
    completions: AtomicU64,
    frames_sent: [AtomicU64; 9],
    max_metadata_frame: AtomicUsize,
    max_unexpected_received: AtomicUsize,
}

impl NalStats {
    pub fn initiations(&self) -> u64 {
        self.initiations.load(Ordering::SeqCst)
    }

    pub fn completions(&self) -> u64 {
        self.completions.load(Ordering::SeqCst)
    }

    pub fn frames_sent(&self, kind: MessageKind) -> u64 {
        self.frames_sent[kind as usize].load(Ordering::SeqCst)
    }

    /// Largest REQUEST/RESPONSE/ERROR frame put on the wire, header included.
    pub fn max_metadata_frame(&self) -> usize {
        self.max_metadata_frame.load(Ordering::SeqCst)
    }

    pub fn max_unexpected_received(&self) -> usize {
        self.max_unexpected_received.load(Ordering::SeqCst)
    }

    pub fn record_frame(&self, kind: MessageKind, frame_len: usize) {
        self.frames_sent[kind as usize].fetch_add(1, Ordering::SeqCst);
        if kind.is_metadata() {
            self.max_metadata_frame.fetch_max(frame_len, Ordering::SeqCst);
        }
    }

    pub(crate) fn record_received(&self, frame_len: usize) {
        self.max_unexpected_received
            .fetch_max(frame_len, Ordering::SeqCst);
    }
}

/// The plugin contract.
///
/// Implementations must be safe under concurrent calls from any thread, and
/// must produce exactly one [`NalCompletion`] per successful `send_unexpected`,
/// `get` or `put`, either from `progress` or from `close`.
pub trait Transport: Send + Sync {
    /// `msg` is a complete metadata frame already checked against the eager limit.
    fn send_unexpected(&self, dest: &NetAddress, msg: Vec<u8>, tag: Tag) -> Result<OpToken>;
    fn recv_unexpected(&self) -> Result<Option<NalCompletion>>;
    fn mem_expose(&self, region: MemRegion, perm: Permission) -> Result<MemoryKey>;
    fn mem_unexpose(&self, key: MemoryKey) -> Result<()>;
    fn get(&self, op: RemoteAccess) -> Result<OpToken>;
    fn put(&self, op: RemoteAccess) -> Result<OpToken>;
    fn progress(&self, timeout: Duration, out: &mut Vec<NalCompletion>) -> Result<usize>;
    fn cancel(&self, token: OpToken) -> Result<()>;
    /// Closes the endpoint, returning a CANCELED completion for every pending operation.
    fn close(&self) -> Vec<NalCompletion>;
}

struct EndpointInner {
    address: Option<NetAddress>,
    plugin: String,
    config: NalConfig,
    stats: Arc<NalStats>,
    transport: Box<dyn Transport>,
}

impl Drop for EndpointInner {
    fn drop(&mut self) {
        self.transport.close();
    }
}

/// A transport endpoint as seen by the layers above the NAL.
#[derive(Clone)]
pub struct Endpoint {
    inner: Arc<EndpointInner>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("plugin", &self.inner.plugin)
            .field("address", &self.inner.address)
            .finish()
    }
}

impl Endpoint {
    pub fn new(
        plugin: impl Into<String>,
        address: Option<NetAddress>,
        config: NalConfig,
        stats: Arc<NalStats>,
        transport: Box<dyn Transport>,
    ) -> Self {
        Self {
            inner: Arc::new(EndpointInner {
                address,
                plugin: plugin.into(),
                config,
                stats,
                transport,
            }),
        }
    }

    /// `None` for origin-only endpoints that cannot be addressed.
    pub fn address(&self) -> Option<&NetAddress> {
        self.inner.address.as_ref()
    }

    pub fn plugin(&self) -> &str {
        &self.inner.plugin
    }

    pub fn config(&self) -> &NalConfig {
        &self.inner.config
    }

    pub fn eager_limit(&self) -> usize {
        self.inner.config.eager_limit
    }

    pub fn stats(&self) -> &NalStats {
        &self.inner.stats
    }

    pub fn send_unexpected(&self, dest: &NetAddress, msg: Vec<u8>, tag: Tag) -> Result<OpToken> {
        let limit = self.inner.config.max_message();
        if msg.len() > limit {
            return Err(NalError::Oversize {
                len: msg.len(),
                limit,
            });
        }
        let (header, _) = wire::split_frame(&msg)?;
        if !header.kind.is_metadata() {
            return Err(NalError::MalformedFrame(WireError::BadKind(header.kind as u8)));
        }
        let token = self.inner.transport.send_unexpected(dest, msg, tag)?;
        self.inner.stats.initiations.fetch_add(1, Ordering::SeqCst);
        Ok(token)
    }

    pub fn recv_unexpected(&self) -> Result<Option<NalCompletion>> {
        self.inner.transport.recv_unexpected()
    }

    pub fn mem_expose(&self, region: MemRegion, perm: Permission) -> Result<MemoryKey> {
        if region.is_empty() {
            return Err(NalError::EmptyRegion);
        }
        self.inner.transport.mem_expose(region, perm)
    }

    pub fn mem_unexpose(&self, key: MemoryKey) -> Result<()> {
        self.inner.transport.mem_unexpose(key)
    }

    pub fn get(&self, op: RemoteAccess) -> Result<OpToken> {
        check_local(&op)?;
        let token = self.inner.transport.get(op)?;
        self.inner.stats.initiations.fetch_add(1, Ordering::SeqCst);
        Ok(token)
    }

    pub fn put(&self, op: RemoteAccess) -> Result<OpToken> {
        check_local(&op)?;
        let token = self.inner.transport.put(op)?;
        self.inner.stats.initiations.fetch_add(1, Ordering::SeqCst);
        Ok(token)
    }

    /// Drives the transport for at most `timeout` (zero polls) and appends
    /// finished operations to `out`. Returns the number of completions and
    /// unexpected arrivals surfaced.
    pub fn progress(&self, timeout: Duration, out: &mut Vec<NalCompletion>) -> Result<usize> {
        let before = out.len();
        let n = self.inner.transport.progress(timeout, out)?;
        self.inner
            .stats
            .completions
            .fetch_add((out.len() - before) as u64, Ordering::SeqCst);
        Ok(n)
    }

    pub fn cancel(&self, token: OpToken) -> Result<()> {
        self.inner.transport.cancel(token)
    }

    pub fn close(&self) -> Vec<NalCompletion> {
        let done = self.inner.transport.close();
        self.inner
            .stats
            .completions
            .fetch_add(done.len() as u64, Ordering::SeqCst);
        done
    }
}

fn check_local(op: &RemoteAccess) -> Result<()> {
    let len = op.local.len();
    if op.local_offset.checked_add(op.length).is_none_or(|end| end > len) {
        return Err(NalError::LocalRange {
            offset: op.local_offset,
            length: op.length,
            len,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_grammar() {
        let a = NetAddress::parse_syntax("tcp://127.0.0.1:7777").unwrap();
        assert_eq!(a.plugin(), "tcp");
        assert_eq!(a.locator(), "127.0.0.1:7777");
        assert_eq!(a.canonical(), "tcp://127.0.0.1:7777");
        for bad in ["", "tcp", "tcp:/x", "://x", "tcp://", "TCP://x", "t cp://x"] {
            assert!(
                matches!(NetAddress::parse_syntax(bad), Err(NalError::BadUri(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn permissions() {
        assert!(Permission::Read.can_read() && !Permission::Read.can_write());
        assert!(!Permission::Write.can_read() && Permission::Write.can_write());
        assert!(Permission::ReadWrite.can_read() && Permission::ReadWrite.can_write());
        for p in [Permission::Read, Permission::Write, Permission::ReadWrite] {
            assert_eq!(Permission::from_u8(p as u8), Some(p));
        }
        assert_eq!(Permission::from_u8(0), None);
    }
}
