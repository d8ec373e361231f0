//! Bulk data descriptors and one-sided transfers.
//!
//! A LOCAL [`BulkHandle`] exposes an ordered list of regions on the class
//! endpoint. Its serialized form travels inside RPC metadata; the receiver
//! deserializes it into a REMOTE handle and drives [`transfer`] against it.
//! Offsets address the segments as if they were one contiguous buffer.
//!
//! Descriptor layout (little-endian):
//!
//! ```text
//! owner_len:u32 owner:utf8 perm:u8 count:u32 (key:u64 len:u64){count}
//! ```

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::nal::{Endpoint, MemRegion, MemoryKey, NalError, NetAddress, OpToken, Permission, RemoteAccess, Tag};
use crate::rpc::{CallbackInfo, CallbackOp, CompletionEvent, Context, RpcClass, RpcError, Status};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BulkError {
    #[error("bulk handle needs at least one region and no region may be empty")]
    EmptyRegion,
    #[error("class has no listen address; peers could not reach its memory")]
    NotAddressable,
    #[error("malformed bulk descriptor: {0}")]
    Decode(&'static str),
    #[error("range {offset}+{length} exceeds handle size {size}")]
    OutOfRange { offset: u64, length: u64, size: u64 },
    #[error("permission denied: {0}")]
    Permission(&'static str),
    #[error("invalid bulk handle state: {0}")]
    InvalidState(&'static str),
    #[error(transparent)]
    Nal(#[from] NalError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
}

pub type Result<T, E = BulkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BulkOp {
    /// Remote → local (NAL get).
    Pull,
    /// Local → remote (NAL put).
    Push,
}

#[derive(Debug, Clone)]
struct Segment {
    key: MemoryKey,
    len: u64,
    region: Option<MemRegion>,
}

struct BulkInner {
    owner: NetAddress,
    segments: Vec<Segment>,
    total: u64,
    perm: Permission,
    locality: Locality,
    endpoint: Option<Endpoint>,
    freed: AtomicBool,
}

impl Drop for BulkInner {
    fn drop(&mut self) {
        if let Some(ep) = &self.endpoint {
            if !self.freed.swap(true, Ordering::SeqCst) {
                for s in &self.segments {
                    let _ = ep.mem_unexpose(s.key);
                }
            }
        }
    }
}

/// Descriptor of memory that peers can read or write.
#[derive(Clone)]
pub struct BulkHandle {
    inner: Arc<BulkInner>,
}

impl std::fmt::Debug for BulkHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BulkHandle")
            .field("owner", &self.inner.owner)
            .field("segments", &self.segments())
            .field("perm", &self.inner.perm)
            .field("locality", &self.inner.locality)
            .finish()
    }
}

impl BulkHandle {
    /// Exposes `regions`, in order, on the class endpoint.
    pub fn create(class: &RpcClass, regions: Vec<MemRegion>, perm: Permission) -> Result<Self> {
        if regions.is_empty() || regions.iter().any(MemRegion::is_empty) {
            return Err(BulkError::EmptyRegion);
        }
        let owner = class.self_address().ok_or(BulkError::NotAddressable)?.clone();
        let endpoint = class.endpoint().clone();
        let mut segments: Vec<Segment> = Vec::with_capacity(regions.len());
        for region in regions {
            match endpoint.mem_expose(region.clone(), perm) {
                Ok(key) => segments.push(Segment {
                    key,
                    len: region.len() as u64,
                    region: Some(region),
                }),
                Err(e) => {
                    for s in &segments {
                        let _ = endpoint.mem_unexpose(s.key);
                    }
                    return Err(e.into());
                }
            }
        }
        let total = segments.iter().map(|s| s.len).sum();
        Ok(Self {
            inner: Arc::new(BulkInner {
                owner,
                segments,
                total,
                perm,
                locality: Locality::Local,
                endpoint: Some(endpoint),
                freed: AtomicBool::new(false),
            }),
        })
    }

    pub fn owner(&self) -> &NetAddress {
        &self.inner.owner
    }

    pub fn total_size(&self) -> u64 {
        self.inner.total
    }

    pub fn permission(&self) -> Permission {
        self.inner.perm
    }

    pub fn locality(&self) -> Locality {
        self.inner.locality
    }

    pub fn is_freed(&self) -> bool {
        self.inner.freed.load(Ordering::SeqCst)
    }

    /// (key, length) per segment, in order.
    pub fn segments(&self) -> Vec<(MemoryKey, u64)> {
        self.inner.segments.iter().map(|s| (s.key, s.len)).collect()
    }

    /// Exposed regions of a LOCAL handle.
    pub fn regions(&self) -> Vec<MemRegion> {
        self.inner.segments.iter().filter_map(|s| s.region.clone()).collect()
    }

    /// Segment index and offset within it for a logical offset.
    pub fn segment_at(&self, offset: u64) -> Option<(usize, u64)> {
        let mut base = 0;
        for (i, s) in self.inner.segments.iter().enumerate() {
            if offset < base + s.len {
                return Some((i, offset - base));
            }
            base += s.len;
        }
        None
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        if self.inner.locality != Locality::Local {
            return Err(BulkError::InvalidState("only local handles can be serialized"));
        }
        let owner = self.inner.owner.canonical();
        let mut out = Vec::with_capacity(9 + owner.len() + 16 * self.inner.segments.len());
        out.extend_from_slice(&(owner.len() as u32).to_le_bytes());
        out.extend_from_slice(owner.as_bytes());
        out.push(self.inner.perm as u8);
        out.extend_from_slice(&(self.inner.segments.len() as u32).to_le_bytes());
        for s in &self.inner.segments {
            out.extend_from_slice(&s.key.0.to_le_bytes());
            out.extend_from_slice(&s.len.to_le_bytes());
        }
        Ok(out)
    }

    /// REMOTE handle from a serialized descriptor.
    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        let owner_len = r.u32()? as usize;
        let owner = std::str::from_utf8(r.take(owner_len)?).map_err(|_| BulkError::Decode("owner is not utf-8"))?;
        let owner = NetAddress::parse_syntax(owner).map_err(|_| BulkError::Decode("malformed owner address"))?;
        let perm = Permission::from_u8(r.u8()?).ok_or(BulkError::Decode("unknown permission"))?;
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(BulkError::Decode("no segments"));
        }
        if r.0.len() != count.saturating_mul(16) {
            return Err(BulkError::Decode("segment table length mismatch"));
        }
        let mut segments = Vec::with_capacity(count);
        let mut total: u64 = 0;
        for _ in 0..count {
            let key = MemoryKey(r.u64()?);
            let len = r.u64()?;
            if len == 0 {
                return Err(BulkError::Decode("empty segment"));
            }
            total = total.checked_add(len).ok_or(BulkError::Decode("total size overflows"))?;
            segments.push(Segment { key, len, region: None });
        }
        Ok(Self {
            inner: Arc::new(BulkInner {
                owner,
                segments,
                total,
                perm,
                locality: Locality::Remote,
                endpoint: None,
                freed: AtomicBool::new(false),
            }),
        })
    }

    /// Unexposes every segment. Later remote access fails with REMOTE_ERROR.
    pub fn free(&self) -> Result<()> {
        let Some(ep) = &self.inner.endpoint else {
            return Err(BulkError::InvalidState("remote handles cannot be freed"));
        };
        if self.inner.freed.swap(true, Ordering::SeqCst) {
            return Err(BulkError::InvalidState("handle already freed"));
        }
        for s in &self.inner.segments {
            let _ = ep.mem_unexpose(s.key);
        }
        Ok(())
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(BulkError::Decode("truncated descriptor"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// One single-region NAL access of a transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub remote_segment: usize,
    pub remote_offset: u64,
    pub local_segment: usize,
    pub local_offset: u64,
    pub length: u64,
}

/// Splits a logical window into pieces that each stay inside one remote and
/// one local segment.
pub fn split_pieces(remote: &[u64], remote_offset: u64, local: &[u64], local_offset: u64, length: u64) -> Vec<Piece> {
    fn locate(segs: &[u64], mut off: u64) -> (usize, u64) {
        let mut i = 0;
        while i < segs.len() && off >= segs[i] {
            off -= segs[i];
            i += 1;
        }
        (i, off)
    }
    let (mut ri, mut ro) = locate(remote, remote_offset);
    let (mut li, mut lo) = locate(local, local_offset);
    let mut left = length;
    let mut out = Vec::new();
    while left > 0 {
        let n = left.min(remote[ri] - ro).min(local[li] - lo);
        out.push(Piece {
            remote_segment: ri,
            remote_offset: ro,
            local_segment: li,
            local_offset: lo,
            length: n,
        });
        left -= n;
        ro += n;
        lo += n;
        if ro == remote[ri] {
            ri += 1;
            ro = 0;
        }
        if lo == local[li] {
            li += 1;
            lo = 0;
        }
    }
    out
}

struct TransferState {
    remaining: usize,
    first_error: Option<Status>,
    issued: Vec<OpToken>,
    callback: Option<crate::rpc::Callback>,
}

/// Bookkeeping for one multi-piece transfer.
pub(crate) struct Transfer {
    endpoint: Endpoint,
    state: Mutex<TransferState>,
}

impl Transfer {
    pub(crate) fn piece_done(&self, ctx: &Context, status: Status) {
        let (finished, to_cancel) = {
            let mut st = self.state.lock();
            st.remaining -= 1;
            let mut to_cancel = Vec::new();
            if !status.is_ok() && st.first_error.is_none() {
                st.first_error = Some(status);
                to_cancel = std::mem::take(&mut st.issued);
            }
            let finished = if st.remaining == 0 {
                st.callback.take().map(|cb| (cb, st.first_error.unwrap_or(Status::Ok)))
            } else {
                None
            };
            (finished, to_cancel)
        };
        for t in to_cancel {
            let _ = self.endpoint.cancel(t);
        }
        if let Some((cb, status)) = finished {
            ctx.enqueue(bulk_event(status, cb));
        }
    }
}

fn bulk_event(status: Status, cb: crate::rpc::Callback) -> CompletionEvent {
    CompletionEvent::new(
        CallbackInfo {
            op: CallbackOp::Bulk,
            status,
            handle: None,
        },
        cb,
    )
}

/// Moves `length` bytes between a REMOTE and a LOCAL handle. Nonblocking;
/// `callback` runs from trigger with OK only if every piece succeeded,
/// otherwise with the first error seen.
#[allow(clippy::too_many_arguments)]
pub fn transfer<F>(
    ctx: &Context,
    op: BulkOp,
    remote: &BulkHandle,
    remote_offset: u64,
    local: &BulkHandle,
    local_offset: u64,
    length: u64,
    callback: F,
) -> Result<()>
where
    F: FnOnce(&CallbackInfo) + Send + 'static,
{
    if remote.locality() != Locality::Remote {
        return Err(BulkError::InvalidState("remote side must be a deserialized handle"));
    }
    if local.locality() != Locality::Local || local.is_freed() {
        return Err(BulkError::InvalidState("local side must be a live local handle"));
    }
    for (h, off) in [(remote, remote_offset), (local, local_offset)] {
        if off.checked_add(length).is_none_or(|end| end > h.total_size()) {
            return Err(BulkError::OutOfRange {
                offset: off,
                length,
                size: h.total_size(),
            });
        }
    }
    let (rp, lp) = (remote.permission(), local.permission());
    match op {
        BulkOp::Pull if !rp.can_read() => return Err(BulkError::Permission("remote handle is not readable")),
        BulkOp::Pull if !lp.can_write() => return Err(BulkError::Permission("local handle is not writable")),
        BulkOp::Push if !rp.can_write() => return Err(BulkError::Permission("remote handle is not writable")),
        BulkOp::Push if !lp.can_read() => return Err(BulkError::Permission("local handle is not readable")),
        _ => {}
    }
    let callback: crate::rpc::Callback = Box::new(callback);
    if length == 0 {
        ctx.enqueue(bulk_event(Status::Ok, callback));
        return Ok(());
    }
    let rsegs: Vec<u64> = remote.inner.segments.iter().map(|s| s.len).collect();
    let lsegs: Vec<u64> = local.inner.segments.iter().map(|s| s.len).collect();
    let pieces = split_pieces(&rsegs, remote_offset, &lsegs, local_offset, length);
    let endpoint = ctx.class().endpoint().clone();
    let t = Arc::new(Transfer {
        endpoint: endpoint.clone(),
        state: Mutex::new(TransferState {
            remaining: pieces.len(),
            first_error: None,
            issued: Vec::with_capacity(pieces.len()),
            callback: Some(callback),
        }),
    });
    for (i, p) in pieces.iter().enumerate() {
        let tag: Tag = ctx.track(crate::rpc::NalOp::BulkPiece(t.clone()));
        let access = RemoteAccess {
            remote: remote.owner().clone(),
            key: remote.inner.segments[p.remote_segment].key,
            remote_offset: p.remote_offset,
            local: local.inner.segments[p.local_segment]
                .region
                .clone()
                .expect("local segments hold their region"),
            local_offset: p.local_offset as usize,
            length: p.length as usize,
            tag,
        };
        let started = match op {
            BulkOp::Pull => endpoint.get(access),
            BulkOp::Push => endpoint.put(access),
        };
        match started {
            Ok(token) => {
                let mut st = t.state.lock();
                if st.first_error.is_some() {
                    drop(st);
                    let _ = endpoint.cancel(token);
                } else {
                    st.issued.push(token);
                }
            }
            Err(e) => {
                ctx.untrack(tag);
                if i == 0 {
                    return Err(e.into());
                }
                for _ in i..pieces.len() {
                    t.piece_done(ctx, Status::TransportError);
                }
                break;
            }
        }
    }
    Ok(())
}
