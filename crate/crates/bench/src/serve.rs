//! The demo service: `echo`, `bulk_sink` and `stop`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mrpc::bulk::{self, BulkHandle, BulkOp};
use mrpc::nal::{MemRegion, NalConfig, NetAddress, Permission};
use mrpc::rpc::{Context, Handle, RpcClass, Status};
use mrpc::wire::checksum;

use crate::Failure;

pub const ECHO: &str = "echo";
pub const BULK_SINK: &str = "bulk_sink";
pub const STOP: &str = "stop";

/// Grace period for the `stop` response to leave before exiting.
const STOP_GRACE: Duration = Duration::from_secs(1);

pub struct Server {
    class: RpcClass,
    ctx: Context,
    stop: Arc<AtomicBool>,
    stop_sent: Arc<AtomicBool>,
    halt: Arc<AtomicBool>,
}

/// `bulk_sink` reply: pull status(1) ‖ crc32 of the pulled bytes(4).
pub fn encode_sink_reply(status: Status, crc: u32) -> Vec<u8> {
    let mut v = vec![status as u8];
    v.extend_from_slice(&crc.to_le_bytes());
    v
}

pub fn decode_sink_reply(b: &[u8]) -> Option<(Status, u32)> {
    if b.len() != 5 {
        return None;
    }
    Some((Status::from_u8(b[0])?, u32::from_le_bytes(b[1..5].try_into().ok()?)))
}

fn bulk_sink(h: Handle) {
    let reply = |h: &Handle, status: Status, crc: u32| {
        let _ = h.respond(&encode_sink_reply(status, crc), |_| {});
    };
    let Some(ctx) = h.context() else { return };
    let Some(desc) = h.bulk_descriptor() else {
        return reply(&h, Status::DecodeError, 0);
    };
    let Ok(remote) = BulkHandle::deserialize(&desc) else {
        return reply(&h, Status::DecodeError, 0);
    };
    let n = remote.total_size();
    let region = MemRegion::new(n as usize);
    let local = match BulkHandle::create(ctx.class(), vec![region.clone()], Permission::Write) {
        Ok(l) => l,
        Err(_) => return reply(&h, Status::RemoteError, 0),
    };
    let keep = local.clone();
    let target = h.clone();
    let started = bulk::transfer(&ctx, BulkOp::Pull, &remote, 0, &local, 0, n, move |info| {
        let crc = if info.status.is_ok() { region.read(checksum).0 } else { 0 };
        let _ = keep.free();
        reply(&target, info.status, crc);
    });
    if started.is_err() {
        let _ = local.free();
        reply(&h, Status::RemoteError, 0);
    }
}

impl Server {
    pub fn start(listen: &str, eager_limit: usize) -> Result<Self, Failure> {
        let class = RpcClass::init_with(Some(listen), NalConfig::with_eager_limit(eager_limit))
            .map_err(|e| Failure::Transport(format!("cannot listen on {listen}: {e}")))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_sent = Arc::new(AtomicBool::new(false));
        class
            .register(ECHO, |h| {
                if let Ok(input) = h.input() {
                    let _ = h.respond(&input, |_| {});
                }
            }, true)
            .and_then(|_| class.register(BULK_SINK, bulk_sink, true))
            .and_then(|_| {
                let (stop, sent) = (stop.clone(), stop_sent.clone());
                class.register(STOP, move |h| {
                    stop.store(true, Ordering::SeqCst);
                    let sent = sent.clone();
                    let _ = h.respond(b"", move |_| sent.store(true, Ordering::SeqCst));
                }, true)
            })
            .map_err(|e| Failure::Usage(e.to_string()))?;
        let ctx = class.create_context();
        Ok(Self {
            class,
            ctx,
            stop,
            stop_sent,
            halt: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn address(&self) -> NetAddress {
        self.class.self_address().expect("listening class").clone()
    }

    /// Flag that ends [`Server::run`] from outside.
    pub fn halt_flag(&self) -> Arc<AtomicBool> {
        self.halt.clone()
    }

    /// Progress/trigger loop; returns after `stop` was received (and its
    /// reply had a chance to leave) or the stop flag was raised.
    pub fn run(self, threads: usize) -> Result<(), Failure> {
        let done = Arc::new(AtomicBool::new(false));
        let mut triggers = Vec::new();
        if threads > 1 {
            for _ in 0..threads {
                let (ctx, done) = (self.ctx.clone(), done.clone());
                triggers.push(std::thread::spawn(move || {
                    while !done.load(Ordering::SeqCst) {
                        if ctx.trigger(64).unwrap_or(0) == 0 {
                            std::thread::sleep(Duration::from_micros(50));
                        }
                    }
                }));
            }
        }
        let mut stopping_since: Option<Instant> = None;
        let result = loop {
            if let Err(e) = self.ctx.progress(Duration::from_millis(1)) {
                break Err(Failure::Transport(e.to_string()));
            }
            if threads <= 1 {
                let _ = self.ctx.trigger(usize::MAX);
            }
            if self.halt.load(Ordering::SeqCst) {
                break Ok(());
            }
            if self.stop.load(Ordering::SeqCst) {
                let since = *stopping_since.get_or_insert_with(Instant::now);
                if self.stop_sent.load(Ordering::SeqCst) || since.elapsed() > STOP_GRACE {
                    break Ok(());
                }
            }
        };
        done.store(true, Ordering::SeqCst);
        for t in triggers {
            let _ = t.join();
        }
        self.class.close();
        result
    }
}

/// A server running on a background thread of this process.
pub struct LocalServer {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), Failure>>>,
}

impl LocalServer {
    pub fn spawn(listen: &str, eager_limit: usize, threads: usize) -> Result<Self, Failure> {
        let server = Server::start(listen, eager_limit)?;
        let stop = server.halt_flag();
        let thread = std::thread::spawn(move || server.run(threads));
        Ok(Self {
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for LocalServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
