//! Origin-side helpers shared by the latency and bandwidth commands.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mrpc::nal::{self, NalConfig, NalError, NetAddress};
use mrpc::rpc::{Context, RpcClass, RpcError, Status};

use crate::serve::LocalServer;
use crate::Failure;

pub fn setup_failure(what: &str, e: RpcError) -> Failure {
    match e {
        RpcError::Nal(NalError::BadUri(_) | NalError::UnknownPlugin(_)) => Failure::Usage(format!("{what}: {e}")),
        e => Failure::Transport(format!("{what}: {e}")),
    }
}

/// Exit class of a non-OK call status.
pub fn status_failure(status: Status, what: &str) -> Failure {
    match status {
        Status::TransportError | Status::Timeout | Status::Canceled => Failure::Transport(format!("{what}: {status}")),
        _ => Failure::Correctness(format!("{what}: {status}")),
    }
}

pub fn parse_server(uri: &str) -> Result<NetAddress, Failure> {
    nal::parse_address(uri).map_err(|e| setup_failure("server address", e.into()))
}

/// Loop servers can only live in this process, so one is started here.
pub fn local_server_for(server: &NetAddress, eager_limit: usize, threads: usize) -> Result<Option<LocalServer>, Failure> {
    if server.plugin() != nal::loopback::PLUGIN {
        return Ok(None);
    }
    LocalServer::spawn(&server.canonical(), eager_limit, threads).map(Some)
}

/// A class on the server's plugin. Addressable classes can expose memory.
pub fn client_class(server: &NetAddress, eager_limit: usize, addressable: bool) -> Result<RpcClass, Failure> {
    let config = NalConfig::with_eager_limit(eager_limit);
    let class = match server.plugin() {
        nal::tcp::PLUGIN if addressable => RpcClass::init_with(Some("tcp://127.0.0.1:0"), config),
        nal::tcp::PLUGIN => RpcClass::init_with(None, config),
        plugin => nal::open_endpoint(plugin, None, &config)
            .map(RpcClass::from_endpoint)
            .map_err(RpcError::from),
    };
    class.map_err(|e| setup_failure("client endpoint", e))
}

/// Extra threads that drain the completion queue while the main thread
/// drives requests.
pub struct TriggerPool {
    done: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl TriggerPool {
    pub fn start(ctx: &Context, threads: usize) -> Self {
        let done = Arc::new(AtomicBool::new(false));
        let threads = (1..threads)
            .map(|_| {
                let (ctx, done) = (ctx.clone(), done.clone());
                std::thread::spawn(move || {
                    while !done.load(Ordering::SeqCst) {
                        if ctx.trigger(64).unwrap_or(0) == 0 {
                            std::thread::sleep(Duration::from_micros(50));
                        }
                    }
                })
            })
            .collect();
        Self { done, threads }
    }
}

impl Drop for TriggerPool {
    fn drop(&mut self) {
        self.done.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
