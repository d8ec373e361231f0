//! In-process loopback plugin.
//!
//! Endpoints live in a process-global fabric keyed by locator token. All
//! work (message delivery and memory copies) is executed by the initiator's
//! `progress`, never inline, so completion timing matches a real transport.
//!
//! [`FaultPlan`] lets tests drop outgoing messages, delay operations, or
//! stall an endpoint so nothing addressed to it is delivered.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{
    copy_between, Endpoint, MemRegion, MemoryKey, NalCompletion, NalConfig, NalError, NalStats,
    NalStatus, NetAddress, OpKind, OpToken, Permission, RemoteAccess, Result, Tag, Transport,
};
use crate::wire;

pub const PLUGIN: &str = "loop";

/// Poll interval while operations are held by a stalled peer.
const STALL_POLL: Duration = Duration::from_millis(1);

static FABRIC: LazyLock<Mutex<HashMap<(String, String), Weak<LoopShared>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));
static ANON: AtomicU64 = AtomicU64::new(0);

/// Test-only fault knobs for one loop endpoint.
#[derive(Debug, Default)]
pub struct FaultPlan {
    drop_next: AtomicUsize,
    delay_us: AtomicU64,
    stalled: AtomicBool,
}

impl FaultPlan {
    /// Silently lose the next `n` outgoing messages (their sends still complete OK).
    pub fn drop_next(&self, n: usize) {
        self.drop_next.store(n, Ordering::SeqCst);
    }

    /// Hold every operation initiated from now on for at least `d`.
    pub fn delay(&self, d: Duration) {
        self.delay_us.store(d.as_micros() as u64, Ordering::SeqCst);
    }

    /// While stalled, nothing addressed to this endpoint (messages, gets, puts)
    /// is executed; initiators keep the operations pending.
    pub fn set_stalled(&self, stalled: bool) {
        self.stalled.store(stalled, Ordering::SeqCst);
    }

    pub fn is_stalled(&self) -> bool {
        self.stalled.load(Ordering::SeqCst)
    }

    fn take_drop(&self) -> bool {
        self.drop_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    fn current_delay(&self) -> Duration {
        Duration::from_micros(self.delay_us.load(Ordering::SeqCst))
    }
}

/// Fault knobs of the live loop endpoint at `locator`.
pub fn faults(locator: &str) -> Option<Arc<FaultPlan>> {
    faults_in(PLUGIN, locator)
}

pub(crate) fn faults_in(namespace: &str, locator: &str) -> Option<Arc<FaultPlan>> {
    FABRIC
        .lock()
        .get(&(namespace.to_string(), locator.to_string()))
        .and_then(Weak::upgrade)
        .map(|s| s.faults.clone())
}

fn lookup(addr: &NetAddress) -> Option<Arc<LoopShared>> {
    FABRIC
        .lock()
        .get(&(addr.plugin().to_string(), addr.locator().to_string()))
        .and_then(Weak::upgrade)
}

enum Body {
    Send { dest: NetAddress, msg: Vec<u8> },
    Get(RemoteAccess),
    Put(RemoteAccess),
}

impl Body {
    fn kind(&self) -> OpKind {
        match self {
            Body::Send { .. } => OpKind::Send,
            Body::Get(_) => OpKind::Get,
            Body::Put(_) => OpKind::Put,
        }
    }

    fn target(&self) -> &NetAddress {
        match self {
            Body::Send { dest, .. } => dest,
            Body::Get(op) | Body::Put(op) => &op.remote,
        }
    }

    fn tag(&self, send_tag: Tag) -> Tag {
        match self {
            Body::Send { .. } => send_tag,
            Body::Get(op) | Body::Put(op) => op.tag,
        }
    }
}

struct Pending {
    token: OpToken,
    tag: Tag,
    ready_at: Instant,
    body: Body,
}

#[derive(Default)]
struct LoopState {
    open: bool,
    unexpected: VecDeque<NalCompletion>,
    pending: VecDeque<Pending>,
    /// Taken by a progress call but not yet surfaced.
    executing: HashSet<OpToken>,
    finished: Vec<NalCompletion>,
    arrivals: usize,
    /// Bumped on every state change a waiting progress call cares about.
    generation: u64,
}

struct LoopShared {
    address: NetAddress,
    config: NalConfig,
    stats: Arc<NalStats>,
    faults: Arc<FaultPlan>,
    alive: AtomicBool,
    state: Mutex<LoopState>,
    wake: Condvar,
    regions: Mutex<HashMap<MemoryKey, (MemRegion, Permission)>>,
    next_key: AtomicU64,
    next_token: AtomicU64,
}

impl LoopShared {
    fn notify(&self) {
        self.wake.notify_all();
    }

    fn deliver(&self, source: &NetAddress, msg: Vec<u8>) -> NalStatus {
        let mut st = self.state.lock();
        if !st.open {
            return NalStatus::TransportError;
        }
        if st.unexpected.len() >= self.config.unexpected_capacity {
            return NalStatus::TransportError;
        }
        self.stats.record_received(msg.len());
        st.unexpected
            .push_back(NalCompletion::received(source.clone(), msg));
        st.arrivals += 1;
        st.generation += 1;
        drop(st);
        self.notify();
        NalStatus::Ok
    }

    fn lookup_region(&self, key: MemoryKey) -> Option<(MemRegion, Permission)> {
        self.regions.lock().get(&key).cloned()
    }
}

pub struct LoopTransport {
    shared: Arc<LoopShared>,
}

/// Opens a loop endpoint at `loop://locator`; `None` picks a fresh token.
pub fn listen(locator: Option<&str>, config: &NalConfig) -> Result<Endpoint> {
    listen_in(PLUGIN, locator, config)
}

/// Like [`listen`], in a separate fabric namespace named after `plugin`.
pub(crate) fn listen_in(plugin: &str, locator: Option<&str>, config: &NalConfig) -> Result<Endpoint> {
    let (transport, stats, address) = LoopTransport::bind(plugin, locator, config)?;
    Ok(Endpoint::new(
        plugin,
        Some(address),
        config.clone(),
        stats,
        Box::new(transport),
    ))
}

impl LoopTransport {
    pub(crate) fn bind(
        plugin: &str,
        locator: Option<&str>,
        config: &NalConfig,
    ) -> Result<(Self, Arc<NalStats>, NetAddress)> {
        let locator = match locator {
            Some(l) => l.to_string(),
            None => format!("anon-{}", ANON.fetch_add(1, Ordering::SeqCst)),
        };
        let address = NetAddress::new(plugin, locator.clone());
        let stats = Arc::new(NalStats::default());
        let mut fabric = FABRIC.lock();
        let key = (plugin.to_string(), locator);
        if let Some(existing) = fabric.get(&key).and_then(Weak::upgrade) {
            if existing.alive.load(Ordering::SeqCst) {
                return Err(NalError::AddressInUse(address.canonical()));
            }
        }
        let shared = Arc::new(LoopShared {
            address: address.clone(),
            config: config.clone(),
            stats: stats.clone(),
            faults: Arc::new(FaultPlan::default()),
            alive: AtomicBool::new(true),
            state: Mutex::new(LoopState {
                open: true,
                ..LoopState::default()
            }),
            wake: Condvar::new(),
            regions: Mutex::new(HashMap::new()),
            next_key: AtomicU64::new(1),
            next_token: AtomicU64::new(1),
        });
        fabric.insert(key, Arc::downgrade(&shared));
        Ok((Self { shared }, stats, address))
    }

    pub fn faults(&self) -> Arc<FaultPlan> {
        self.shared.faults.clone()
    }

    fn enqueue(&self, tag: Tag, body: Body) -> Result<OpToken> {
        let token = OpToken(self.shared.next_token.fetch_add(1, Ordering::SeqCst));
        let ready_at = Instant::now() + self.shared.faults.current_delay();
        let mut st = self.shared.state.lock();
        if !st.open {
            return Err(NalError::Closed);
        }
        st.pending.push_back(Pending {
            token,
            tag,
            ready_at,
            body,
        });
        st.generation += 1;
        drop(st);
        self.shared.notify();
        Ok(token)
    }

    fn execute(&self, op: Pending) -> NalCompletion {
        let kind = op.body.kind();
        let tag = op.body.tag(op.tag);
        let status = match op.body {
            Body::Send { dest, msg } => {
                if let Ok((h, _)) = wire::split_frame(&msg) {
                    self.shared.stats.record_frame(h.kind, msg.len());
                }
                if self.shared.faults.take_drop() {
                    NalStatus::Ok
                } else {
                    match lookup(&dest) {
                        Some(peer) => peer.deliver(&self.shared.address, msg),
                        None => NalStatus::TransportError,
                    }
                }
            }
            Body::Get(op) => self.one_sided(&op, OpKind::Get),
            Body::Put(op) => self.one_sided(&op, OpKind::Put),
        };
        NalCompletion::of(kind, status, op.token, tag)
    }

    fn one_sided(&self, op: &RemoteAccess, kind: OpKind) -> NalStatus {
        if op.length == 0 {
            return NalStatus::Ok;
        }
        let Some(peer) = lookup(&op.remote) else {
            return NalStatus::TransportError;
        };
        if !peer.state.lock().open {
            return NalStatus::TransportError;
        }
        let Some((region, perm)) = peer.lookup_region(op.key) else {
            return NalStatus::RemoteError;
        };
        let allowed = match kind {
            OpKind::Get => perm.can_read(),
            _ => perm.can_write(),
        };
        let in_range = op
            .remote_offset
            .checked_add(op.length as u64)
            .is_some_and(|end| end <= region.len() as u64);
        if !allowed || !in_range {
            return NalStatus::RemoteError;
        }
        let remote_off = op.remote_offset as usize;
        match kind {
            OpKind::Get => copy_between(&region, remote_off, &op.local, op.local_offset, op.length),
            _ => copy_between(&op.local, op.local_offset, &region, remote_off, op.length),
        }
        NalStatus::Ok
    }

    /// Takes every operation that may run now. Operations toward a stalled
    /// peer stay queued in their original order.
    fn take_ready(&self, st: &mut LoopState, now: Instant) -> (Vec<Pending>, Option<Instant>, bool) {
        let mut ready = Vec::new();
        let mut keep = VecDeque::new();
        let mut next_ready: Option<Instant> = None;
        let mut stalled = false;
        let mut blocked_targets: HashSet<NetAddress> = HashSet::new();
        while let Some(op) = st.pending.pop_front() {
            let target = op.body.target().clone();
            let peer_stalled = blocked_targets.contains(&target)
                || faults_in(target.plugin(), target.locator()).is_some_and(|f| f.is_stalled());
            if peer_stalled {
                stalled = true;
                blocked_targets.insert(target);
                keep.push_back(op);
            } else if op.ready_at > now {
                next_ready = Some(next_ready.map_or(op.ready_at, |t| t.min(op.ready_at)));
                // keep per-target order behind a delayed operation
                blocked_targets.insert(target);
                keep.push_back(op);
            } else {
                st.executing.insert(op.token);
                ready.push(op);
            }
        }
        st.pending = keep;
        (ready, next_ready, stalled)
    }
}

impl Transport for LoopTransport {
    fn send_unexpected(&self, dest: &NetAddress, msg: Vec<u8>, tag: Tag) -> Result<OpToken> {
        self.enqueue(
            tag,
            Body::Send {
                dest: dest.clone(),
                msg,
            },
        )
    }

    fn recv_unexpected(&self) -> Result<Option<NalCompletion>> {
        let mut st = self.shared.state.lock();
        if !st.open {
            return Err(NalError::Closed);
        }
        Ok(st.unexpected.pop_front())
    }

    fn mem_expose(&self, region: MemRegion, perm: Permission) -> Result<MemoryKey> {
        if !self.shared.state.lock().open {
            return Err(NalError::Closed);
        }
        let key = MemoryKey(self.shared.next_key.fetch_add(1, Ordering::SeqCst));
        self.shared.regions.lock().insert(key, (region, perm));
        Ok(key)
    }

    fn mem_unexpose(&self, key: MemoryKey) -> Result<()> {
        self.shared
            .regions
            .lock()
            .remove(&key)
            .map(|_| ())
            .ok_or(NalError::UnknownKey(key))
    }

    fn get(&self, op: RemoteAccess) -> Result<OpToken> {
        self.enqueue(op.tag, Body::Get(op))
    }

    fn put(&self, op: RemoteAccess) -> Result<OpToken> {
        self.enqueue(op.tag, Body::Put(op))
    }

    fn progress(&self, timeout: Duration, out: &mut Vec<NalCompletion>) -> Result<usize> {
        let deadline = Instant::now() + timeout;
        loop {
            let mut st = self.shared.state.lock();
            if !st.open {
                return Err(NalError::Closed);
            }
            let now = Instant::now();
            let generation = st.generation;
            let (ready, next_ready, stalled) = self.take_ready(&mut st, now);
            let mut count = st.finished.len() + std::mem::take(&mut st.arrivals);
            out.append(&mut st.finished);
            drop(st);

            if !ready.is_empty() {
                let done: Vec<NalCompletion> = ready.into_iter().map(|op| self.execute(op)).collect();
                let mut st = self.shared.state.lock();
                for c in &done {
                    if let Some(t) = c.token {
                        st.executing.remove(&t);
                    }
                }
                drop(st);
                count += done.len();
                out.extend(done);
            }
            if count > 0 {
                return Ok(count);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(0);
            }
            let mut wait_until = deadline;
            if let Some(t) = next_ready {
                wait_until = wait_until.min(t);
            }
            if stalled {
                wait_until = wait_until.min(now + STALL_POLL);
            }
            let mut st = self.shared.state.lock();
            if st.generation == generation && st.open {
                self.shared.wake.wait_until(&mut st, wait_until);
            }
        }
    }

    fn cancel(&self, token: OpToken) -> Result<()> {
        let mut st = self.shared.state.lock();
        if let Some(pos) = st.pending.iter().position(|p| p.token == token) {
            let op = st.pending.remove(pos).expect("position is valid");
            let tag = op.body.tag(op.tag);
            st.finished.push(NalCompletion::of(
                op.body.kind(),
                NalStatus::Canceled,
                token,
                tag,
            ));
            st.generation += 1;
            drop(st);
            self.shared.notify();
            return Ok(());
        }
        if st.executing.contains(&token) {
            // raced with execution; the completion status is authoritative
            return Ok(());
        }
        Err(NalError::UnknownToken)
    }

    fn close(&self) -> Vec<NalCompletion> {
        let mut st = self.shared.state.lock();
        if !st.open {
            return Vec::new();
        }
        st.open = false;
        st.generation += 1;
        self.shared.alive.store(false, Ordering::SeqCst);
        let mut done = std::mem::take(&mut st.finished);
        for op in st.pending.drain(..) {
            let tag = op.body.tag(op.tag);
            done.push(NalCompletion::of(
                op.body.kind(),
                NalStatus::Canceled,
                op.token,
                tag,
            ));
        }
        st.unexpected.clear();
        drop(st);
        self.shared.regions.lock().clear();
        let key = (
            self.shared.address.plugin().to_string(),
            self.shared.address.locator().to_string(),
        );
        let mut fabric = FABRIC.lock();
        if fabric
            .get(&key)
            .is_some_and(|w| std::ptr::eq(w.as_ptr(), Arc::as_ptr(&self.shared)))
        {
            fabric.remove(&key);
        }
        drop(fabric);
        self.shared.notify();
        done
    }
}

impl Drop for LoopTransport {
    fn drop(&mut self) {
        self.close();
    }
}
