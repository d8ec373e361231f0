//! `bench`: echo latency, bulk bandwidth and a two-peer demo on top of mrpc.

mod bandwidth;
mod client;
mod config;
mod latency;
mod peers;
mod report;
mod serve;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{BenchConfig, ConfigFile, Overrides};
use report::BenchReport;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Correctness(String),
    Transport(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Correctness(m) | Failure::Transport(m) => m,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Correctness(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Transport(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "bench", version, about = "Benchmarks and demos for mrpc")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value file with defaults for any option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Eager message limit in bytes (also BENCH_EAGER_LIMIT).
    #[arg(long, global = true)]
    eager_limit: Option<usize>,
    /// Threads calling trigger.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Per-call timeout in milliseconds.
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
    /// Emit the report as one JSON object.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeerTransport {
    Loop,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve echo, bulk_sink and stop until stopped.
    Serve {
        #[arg(long, default_value = "tcp://127.0.0.1:0")]
        listen: String,
    },
    /// Echo round-trip latency.
    Latency {
        /// Server address; a loop:// address starts a server in this process.
        #[arg(long)]
        server: Option<String>,
        /// Payload bytes per request.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Bulk pull throughput with CRC check.
    Bandwidth {
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        bulk_size: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Flip a byte of the region after it was exposed.
        #[arg(long, hide = true)]
        corrupt_after_expose: bool,
    },
    /// Two peers calling each other N times.
    Peers {
        #[arg(long, value_enum, default_value = "loop")]
        transport: PeerTransport,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Kill the second process after this many calls (tcp only).
        #[arg(long, hide = true)]
        kill_peer_after: Option<usize>,
    },
    #[command(hide = true)]
    PeerNode {
        #[arg(long)]
        n: usize,
    },
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        eager_limit: common.eager_limit,
        threads: common.threads,
        timeout_ms: common.timeout_ms,
        json: common.json,
        ..Overrides::default()
    }
}

fn default_server(cfg: &BenchConfig) -> String {
    match cfg.transport.as_str() {
        "tcp" => "tcp://127.0.0.1:0".into(),
        "loop" => format!("loop://bench-{}", std::process::id()),
        uri => uri.into(),
    }
}

fn report_and_exit(cfg: &BenchConfig, (report, failure): (BenchReport, Option<Failure>)) -> Result<(), Failure> {
    report.emit(cfg.format);
    match failure {
        None => Ok(()),
        Some(f) => {
            eprintln!("bench: {}", f.message());
            std::process::exit(f.code() as i32);
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut flags = overrides(&cli.common);
    match cli.command {
        Cmd::Serve { listen } => {
            let cfg = BenchConfig::resolve(&flags, &file)?;
            let server = serve::Server::start(&listen, cfg.eager_limit)?;
            println!("LISTEN {}", server.address().canonical());
            std::io::stdout().flush().ok();
            server.run(cfg.threads)
        }
        Cmd::Latency {
            server,
            size,
            iters,
            warmup,
        } => {
            flags.payload_size = size;
            flags.iterations = iters;
            flags.warmup = warmup;
            let cfg = BenchConfig::resolve(&flags, &file)?;
            let server = server.unwrap_or_else(|| default_server(&cfg));
            report_and_exit(&cfg, latency::run(&cfg, &server))
        }
        Cmd::Bandwidth {
            server,
            bulk_size,
            iters,
            warmup,
            corrupt_after_expose,
        } => {
            flags.bulk_size = bulk_size;
            flags.iterations = iters;
            flags.warmup = warmup;
            let cfg = BenchConfig::resolve_for(&flags, &file, 1, 0)?;
            let server = server.unwrap_or_else(|| default_server(&cfg));
            report_and_exit(&cfg, bandwidth::run(&cfg, &server, corrupt_after_expose))
        }
        Cmd::Peers {
            transport,
            n,
            kill_peer_after,
        } => {
            let cfg = BenchConfig::resolve(&flags, &file)?;
            let outcome = match transport {
                PeerTransport::Loop if kill_peer_after.is_some() => {
                    return Err(Failure::Usage("--kill-peer-after needs --transport tcp".into()))
                }
                PeerTransport::Loop => peers::run_loop(&cfg, n),
                PeerTransport::Tcp => peers::run_tcp(&cfg, n, kill_peer_after),
            };
            report_and_exit(&cfg, outcome)
        }
        Cmd::PeerNode { n } => {
            let cfg = BenchConfig::resolve(&flags, &file)?;
            peers::peer_node(&cfg, n)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bench: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
