use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;

/// A fixed-length, shareable byte region that can be exposed for remote access.
///
/// Clones refer to the same memory; exposing a region never copies it.
#[derive(Clone)]
pub struct MemRegion {
    data: Arc<RwLock<Box<[u8]>>>,
    len: usize,
}

impl MemRegion {
    /// Zero-filled region. Large allocations are lazily backed by the OS.
    pub fn new(len: usize) -> Self {
        Self::from_vec(vec![0u8; len])
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        let len = v.len();
        Self {
            data: Arc::new(RwLock::new(v.into_boxed_slice())),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn read<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(&self.data.read())
    }

    pub fn write<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(&mut self.data.write())
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.data.read().to_vec()
    }

    /// Copies `dst.len()` bytes starting at `offset` into `dst`.
    pub fn read_at(&self, offset: usize, dst: &mut [u8]) {
        let data = self.data.read();
        dst.copy_from_slice(&data[offset..offset + dst.len()]);
    }

    pub fn write_at(&self, offset: usize, src: &[u8]) {
        let mut data = self.data.write();
        data[offset..offset + src.len()].copy_from_slice(src);
    }

    pub fn same_memory(&self, other: &MemRegion) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Address of the first byte; stable for the region's lifetime.
    pub fn as_ptr(&self) -> *const u8 {
        self.data.read().as_ptr()
    }
}

impl fmt::Debug for MemRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemRegion").field("len", &self.len).finish()
    }
}

/// Copies `len` bytes from `src[src_off..]` into `dst[dst_off..]`.
///
/// Never holds locks on both regions at once, so concurrent copies in
/// opposite directions cannot deadlock.
pub(crate) fn copy_between(src: &MemRegion, src_off: usize, dst: &MemRegion, dst_off: usize, len: usize) {
    if src.same_memory(dst) {
        dst.write(|d| d.copy_within(src_off..src_off + len, dst_off));
        return;
    }
    const STEP: usize = 1 << 20;
    let mut tmp = vec![0u8; len.min(STEP)];
    let mut done = 0;
    while done < len {
        let n = (len - done).min(STEP);
        src.read_at(src_off + done, &mut tmp[..n]);
        dst.write_at(dst_off + done, &tmp[..n]);
        done += n;
    }
}
