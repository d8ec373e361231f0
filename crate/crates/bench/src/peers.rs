//! Two classes that serve `ping` and call each other at the same time.
//!
//! Over `loop` both peers run in this process. Over `tcp` the second peer is
//! a child process (`bench peer-node`) that reports its own tally back with a
//! `peer_done` call before it is told to exit.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use mrpc::nal::{self, NalConfig, NetAddress};
use mrpc::rpc::{Context, Handle, RpcClass, Status};
use mrpc::wire::rpc_id_from_name;

use crate::client::TriggerPool;
use crate::config::BenchConfig;
use crate::report::BenchReport;
use crate::Failure;

pub const PING: &str = "ping";
pub const PEER_DONE: &str = "peer_done";

/// Tally code for calls never sent.
const NOT_ISSUED: u8 = u8::MAX;

/// Calls kept in flight per peer.
const WINDOW: usize = 16;

#[derive(Debug, Default, Clone)]
pub struct Tally {
    pub ok: usize,
    pub mismatches: usize,
    pub failed: BTreeMap<String, usize>,
    pub samples: Vec<Duration>,
}

impl Tally {
    fn add_failure(&mut self, name: &str, n: usize) {
        if n > 0 {
            *self.failed.entry(name.to_string()).or_default() += n;
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.ok += other.ok;
        self.mismatches += other.mismatches;
        for (k, v) in &other.failed {
            self.add_failure(k, *v);
        }
        self.samples.extend_from_slice(&other.samples);
    }

    fn failures(&self) -> usize {
        self.failed.values().sum()
    }

    /// ok(4) ‖ mismatches(4) ‖ count(4) ‖ (status(1) ‖ n(4))*
    fn encode(&self) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&(self.ok as u32).to_le_bytes());
        v.extend_from_slice(&(self.mismatches as u32).to_le_bytes());
        v.extend_from_slice(&(self.failed.len() as u32).to_le_bytes());
        for (name, n) in &self.failed {
            let code = (0..=6u8).find(|c| Status::from_u8(*c).is_some_and(|s| s.name() == name)).unwrap_or(NOT_ISSUED);
            v.push(code);
            v.extend_from_slice(&(*n as u32).to_le_bytes());
        }
        v
    }

    fn decode(b: &[u8]) -> Option<Self> {
        let word = |i: usize| b.get(i..i + 4).map(|w| u32::from_le_bytes(w.try_into().unwrap()) as usize);
        let mut t = Tally {
            ok: word(0)?,
            mismatches: word(4)?,
            ..Tally::default()
        };
        let count = word(8)?;
        for i in 0..count {
            let at = 12 + i * 5;
            let name = match *b.get(at)? {
                NOT_ISSUED => "NOT_ISSUED",
                c => Status::from_u8(c).map_or("UNKNOWN", Status::name),
            };
            t.add_failure(name, word(at + 1)?);
        }
        Some(t)
    }

    pub fn summary(&self, total: usize) -> String {
        let mut s = format!("{total} calls: {} OK", self.ok);
        for (k, v) in &self.failed {
            s.push_str(&format!(", {v} {k}"));
        }
        if self.mismatches > 0 {
            s.push_str(&format!(", {} mismatched", self.mismatches));
        }
        s
    }

    fn failure(&self, total: usize) -> Option<(String, Failure)> {
        let summary = self.summary(total);
        let transport = ["TRANSPORT_ERROR", "TIMEOUT", "CANCELED", "NOT_ISSUED"];
        if let Some(name) = transport.iter().find(|n| self.failed.contains_key(**n)) {
            return Some((name.to_string(), Failure::Transport(summary)));
        }
        if let Some(name) = self.failed.keys().next() {
            return Some((name.clone(), Failure::Correctness(summary)));
        }
        if self.mismatches > 0 || self.ok != total {
            return Some(("MISMATCH".into(), Failure::Correctness(summary)));
        }
        None
    }
}

fn register_ping(class: &RpcClass) -> Result<(), Failure> {
    class
        .register(PING, |h: Handle| {
            if let Ok(input) = h.input() {
                let _ = h.respond(&input, |_| {});
            }
        }, true)
        .map(|_| ())
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn pump(ctx: &Context, threads: usize) -> Result<(), Failure> {
    ctx.progress(Duration::from_millis(1))
        .map_err(|e| Failure::Transport(e.to_string()))?;
    if threads <= 1 {
        let _ = ctx.trigger(usize::MAX);
    }
    Ok(())
}

type Outcome = (usize, Status, bool);

/// Issues `n` pings to `peer`, at most [`WINDOW`] at a time. The first
/// transport failure stops new calls and cancels the rest. `on_done` sees the
/// running count of finished calls.
fn call_peer(
    ctx: &Context,
    peer: &NetAddress,
    n: usize,
    timeout: Duration,
    threads: usize,
    mut on_done: impl FnMut(usize),
) -> Result<Tally, Failure> {
    let id = rpc_id_from_name(PING).expect("static name");
    let results: Arc<Mutex<Vec<Outcome>>> = Arc::default();
    let mut pending: HashMap<usize, (Handle, Instant)> = HashMap::new();
    let mut tally = Tally::default();
    let mut issued = 0;
    let mut aborted = false;
    let mut finished = 0;
    while (issued < n && !aborted) || !pending.is_empty() {
        while issued < n && !aborted && pending.len() < WINDOW {
            let i = issued;
            issued += 1;
            let input = (i as u64).to_le_bytes();
            let h = ctx.create_handle(peer, id).map_err(|e| Failure::Transport(e.to_string()))?;
            let sink = results.clone();
            let sent = h.forward(&input, None, move |info| {
                let same = info.handle.as_ref().and_then(|h| h.output().ok()).as_deref() == Some(&input[..]);
                sink.lock().unwrap().push((i, info.status, same));
            });
            match sent {
                Ok(()) => {
                    pending.insert(i, (h, Instant::now()));
                }
                Err(_) => {
                    tally.add_failure("TRANSPORT_ERROR", 1);
                    finished += 1;
                    aborted = true;
                }
            }
        }
        pump(ctx, threads)?;
        let done: Vec<Outcome> = std::mem::take(&mut *results.lock().unwrap());
        for (i, status, same) in done {
            let Some((_, started)) = pending.remove(&i) else { continue };
            finished += 1;
            match status {
                Status::Ok if same => {
                    tally.ok += 1;
                    tally.samples.push(started.elapsed());
                }
                Status::Ok => tally.mismatches += 1,
                s => {
                    tally.add_failure(s.name(), 1);
                    if matches!(s, Status::TransportError | Status::Timeout) && !aborted {
                        aborted = true;
                        for (h, _) in pending.values() {
                            let _ = h.cancel();
                        }
                    }
                }
            }
            on_done(finished);
        }
        for (h, started) in pending.values() {
            if started.elapsed() > timeout {
                let _ = h.cancel();
            }
        }
    }
    tally.add_failure("NOT_ISSUED", n - issued);
    Ok(tally)
}

fn finish(cfg: &BenchConfig, transport: &str, n: usize, tally: Tally, wall: Duration) -> (BenchReport, Option<Failure>) {
    let total = 2 * n;
    let mut report = BenchReport::new("peers", cfg, None);
    report.transport = transport.into();
    report.iterations = total;
    report.warmup = 0;
    report.set_samples(&tally.samples);
    report.completed = tally.ok;
    report.mismatches = tally.mismatches;
    report.throughput_unit = "calls/s".into();
    report.throughput = if tally.ok > 0 { tally.ok as f64 / wall.as_secs_f64() } else { 0.0 };
    eprintln!("peers: {}", tally.summary(total));
    match tally.failure(total) {
        None => (report, None),
        Some((status, failure)) => {
            report.fail(&status, failure.message());
            (report, Some(failure))
        }
    }
}

static NEXT_PAIR: AtomicUsize = AtomicUsize::new(0);

pub fn run_loop(cfg: &BenchConfig, n: usize) -> (BenchReport, Option<Failure>) {
    let start = Instant::now();
    match loop_pair(cfg, n) {
        Ok(t) => finish(cfg, "loop", n, t, start.elapsed()),
        Err(f) => setup_failed(cfg, "loop", f),
    }
}

fn setup_failed(cfg: &BenchConfig, transport: &str, f: Failure) -> (BenchReport, Option<Failure>) {
    let mut r = BenchReport::new("peers", cfg, None);
    r.transport = transport.into();
    r.fail("SETUP", f.message());
    (r, Some(f))
}

fn loop_pair(cfg: &BenchConfig, n: usize) -> Result<Tally, Failure> {
    let tag = format!("{}-{}", std::process::id(), NEXT_PAIR.fetch_add(1, Ordering::SeqCst));
    let open = |name: &str| {
        RpcClass::init_with(Some(&format!("loop://peer-{name}-{tag}")), NalConfig::with_eager_limit(cfg.eager_limit))
            .map_err(|e| Failure::Transport(e.to_string()))
    };
    let (a, b) = (open("a")?, open("b")?);
    register_ping(&a)?;
    register_ping(&b)?;
    let sides_done = Arc::new(AtomicUsize::new(0));
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let threads = cfg.threads;
    let run_side = move |me: RpcClass, peer: NetAddress, sides_done: Arc<AtomicUsize>| -> Result<Tally, Failure> {
        let ctx = me.create_context();
        let _pool = TriggerPool::start(&ctx, threads);
        let tally = call_peer(&ctx, &peer, n, timeout, threads, |_| {});
        sides_done.fetch_add(1, Ordering::SeqCst);
        let deadline = Instant::now() + timeout;
        while sides_done.load(Ordering::SeqCst) < 2 && Instant::now() < deadline {
            pump(&ctx, threads)?;
        }
        tally
    };
    let a_addr = a.self_address().unwrap().clone();
    let b_addr = b.self_address().unwrap().clone();
    let other = {
        let sides_done = sides_done.clone();
        std::thread::spawn(move || run_side(b, a_addr, sides_done))
    };
    let mine = run_side(a, b_addr, sides_done);
    let theirs = other.join().map_err(|_| Failure::Correctness("peer thread panicked".into()))?;
    let mut tally = mine?;
    tally.merge(&theirs?);
    Ok(tally)
}

struct ChildPeer {
    child: Child,
    address: NetAddress,
}

impl ChildPeer {
    fn spawn(cfg: &BenchConfig, n: usize) -> Result<Self, Failure> {
        let exe = std::env::current_exe().map_err(|e| Failure::Usage(e.to_string()))?;
        let mut child = Command::new(exe)
            .args(["--eager-limit", &cfg.eager_limit.to_string()])
            .args(["--threads", &cfg.threads.to_string()])
            .args(["--timeout-ms", &cfg.timeout_ms.to_string()])
            .args(["peer-node", "--n", &n.to_string()])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Failure::Transport(format!("cannot start peer process: {e}")))?;
        let mut line = String::new();
        let stdout = child.stdout.take().expect("piped");
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| Failure::Transport(e.to_string()))?;
        let address = line
            .trim()
            .strip_prefix("LISTEN ")
            .and_then(|u| nal::parse_address(u).ok())
            .ok_or_else(|| Failure::Transport(format!("peer process did not report an address: {line:?}")))?;
        Ok(Self { child, address })
    }

    fn tell(&mut self, line: &str) {
        if let Some(stdin) = self.child.stdin.as_mut() {
            let _ = writeln!(stdin, "{line}");
            let _ = stdin.flush();
        }
    }
}

/// Two-process run. `kill_after` kills the child once this side finished
/// that many calls.
pub fn run_tcp(cfg: &BenchConfig, n: usize, kill_after: Option<usize>) -> (BenchReport, Option<Failure>) {
    let start = Instant::now();
    match tcp_pair(cfg, n, kill_after) {
        Ok(t) => finish(cfg, "tcp", n, t, start.elapsed()),
        Err(f) => setup_failed(cfg, "tcp", f),
    }
}

fn tcp_pair(cfg: &BenchConfig, n: usize, kill_after: Option<usize>) -> Result<Tally, Failure> {
    let class = RpcClass::init_with(Some("tcp://127.0.0.1:0"), NalConfig::with_eager_limit(cfg.eager_limit))
        .map_err(|e| Failure::Transport(e.to_string()))?;
    register_ping(&class)?;
    let reported: Arc<Mutex<Option<Tally>>> = Arc::default();
    {
        let reported = reported.clone();
        class
            .register(PEER_DONE, move |h: Handle| {
                if let Some(t) = h.input().ok().and_then(|b| Tally::decode(&b)) {
                    *reported.lock().unwrap() = Some(t);
                }
                let _ = h.respond(b"", |_| {});
            }, true)
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let ctx = class.create_context();
    let _pool = TriggerPool::start(&ctx, cfg.threads);
    let mut peer = ChildPeer::spawn(cfg, n)?;
    peer.tell(&format!("PEER {}", class.self_address().unwrap().canonical()));
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let mut killed = false;
    let mine = call_peer(&ctx, &peer.address.clone(), n, timeout, cfg.threads, |done| {
        if !killed && kill_after.is_some_and(|k| done >= k) {
            let _ = peer.child.kill();
            killed = true;
        }
    })?;
    let mut tally = mine;
    if killed {
        let _ = peer.child.wait();
        let lost = n.saturating_sub(reported.lock().unwrap().as_ref().map_or(0, |t| t.ok));
        tally.add_failure("NOT_ISSUED", lost);
        return Ok(tally);
    }
    let deadline = Instant::now() + timeout + Duration::from_secs(5);
    while reported.lock().unwrap().is_none() && Instant::now() < deadline {
        pump(&ctx, cfg.threads)?;
        if let Ok(Some(_)) = peer.child.try_wait() {
            break;
        }
    }
    peer.tell("EXIT");
    let status = peer.child.wait().map_err(|e| Failure::Transport(e.to_string()))?;
    match reported.lock().unwrap().take() {
        Some(theirs) => tally.merge(&theirs),
        None => tally.add_failure("TRANSPORT_ERROR", n),
    }
    if !status.success() && tally.failures() == 0 && tally.mismatches == 0 {
        tally.add_failure("REMOTE_ERROR", 1);
    }
    Ok(tally)
}

/// Child side of [`run_tcp`].
pub fn peer_node(cfg: &BenchConfig, n: usize) -> Result<(), Failure> {
    let class = RpcClass::init_with(Some("tcp://127.0.0.1:0"), NalConfig::with_eager_limit(cfg.eager_limit))
        .map_err(|e| Failure::Transport(e.to_string()))?;
    register_ping(&class)?;
    println!("LISTEN {}", class.self_address().unwrap().canonical());
    std::io::stdout().flush().ok();

    let exit = Arc::new(AtomicBool::new(false));
    let (tx, rx) = std::sync::mpsc::channel::<String>();
    {
        let exit = exit.clone();
        std::thread::spawn(move || {
            for line in std::io::stdin().lock().lines() {
                let Ok(line) = line else { break };
                if line.trim() == "EXIT" {
                    break;
                }
                let _ = tx.send(line);
            }
            exit.store(true, Ordering::SeqCst);
        });
    }
    let ctx = class.create_context();
    let _pool = TriggerPool::start(&ctx, cfg.threads);
    let parent = loop {
        if let Ok(line) = rx.try_recv() {
            if let Some(uri) = line.trim().strip_prefix("PEER ") {
                break nal::parse_address(uri).map_err(|e| Failure::Usage(e.to_string()))?;
            }
        }
        if exit.load(Ordering::SeqCst) {
            return Err(Failure::Usage("no PEER line on stdin".into()));
        }
        pump(&ctx, cfg.threads)?;
    };
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let tally = call_peer(&ctx, &parent, n, timeout, cfg.threads, |_| {})?;
    let report = ctx
        .request_post(&parent, rpc_id_from_name(PEER_DONE).expect("static name"), &tally.encode())
        .map_err(|e| Failure::Transport(e.to_string()))?;
    let _ = report.wait(timeout);
    while !exit.load(Ordering::SeqCst) {
        pump(&ctx, cfg.threads)?;
    }
    match tally.failure(n) {
        None => Ok(()),
        Some((_, f)) => Err(f),
    }
}
