//! Exit codes and reports of the `bench` binary.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::Value;

static NEXT: AtomicUsize = AtomicUsize::new(0);

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env_remove("BENCH_EAGER_LIMIT")
        .output()
        .unwrap()
}

fn loop_uri() -> String {
    format!("loop://cli-{}-{}", std::process::id(), NEXT.fetch_add(1, Ordering::SeqCst))
}

fn report(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("a report line")).unwrap()
}

struct Server {
    child: Child,
    uri: String,
}

impl Server {
    fn start() -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_bench"))
            .args(["serve", "--listen", "tcp://127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let uri = line.trim().strip_prefix("LISTEN ").unwrap().to_string();
        assert!(uri.starts_with("tcp://127.0.0.1:") && !uri.ends_with(":0"), "{uri}");
        Server { child, uri }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

const KEYS: [&str; 22] = [
    "operation",
    "transport",
    "server",
    "iterations",
    "warmup",
    "payload_size",
    "bulk_size",
    "eager_limit",
    "threads",
    "completed",
    "p50_us",
    "p90_us",
    "p99_us",
    "mean_us",
    "min_us",
    "max_us",
    "throughput",
    "throughput_unit",
    "mismatches",
    "crc_match",
    "status",
    "error",
];

#[test]
fn latency_report_schema() {
    let out = bench(&["latency", "--server", &loop_uri(), "--iters", "200", "--size", "32", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = KEYS.to_vec();
    expected.sort_unstable();
    let mut keys_sorted = keys.clone();
    keys_sorted.sort_unstable();
    assert_eq!(keys_sorted, expected);
    assert_eq!(r["status"], "OK");
    assert_eq!(r["completed"], 200);
    assert_eq!(r["payload_size"], 32);
    assert!(r["p50_us"].as_f64().unwrap() > 0.0);
    assert!(r["throughput"].as_f64().unwrap() > 0.0);
}

#[test]
fn latency_with_trigger_threads() {
    let out = bench(&["--threads", "4", "latency", "--server", &loop_uri(), "--iters", "300", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(&out)["threads"], 4);
}

#[test]
fn oversize_payload_is_usage_error() {
    let out = bench(&["latency", "--server", &loop_uri(), "--size", "5000", "--iters", "3", "--json"]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(&out);
    assert_eq!(r["status"], "OVERSIZE");
    assert!(r["error"].as_str().unwrap().contains("bandwidth"));
}

#[test]
fn eager_limit_from_env_and_flag() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bench"));
        cmd.env_remove("BENCH_EAGER_LIMIT");
        if let Some(e) = env {
            cmd.env("BENCH_EAGER_LIMIT", e);
        }
        if let Some(f) = flag {
            cmd.args(["--eager-limit", f]);
        }
        cmd.args(["latency", "--server", &loop_uri(), "--size", "5000", "--iters", "3", "--json"]);
        cmd.output().unwrap()
    };
    let out = run(Some("8192"), None);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["eager_limit"], 8192);
    let out = run(Some("8192"), Some("4096"));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(Some("lots"), None).status.code(), Some(2));
}

#[test]
fn config_file_sits_below_flags() {
    let path = std::env::temp_dir().join(format!("bench-cli-{}.conf", std::process::id()));
    std::fs::write(&path, "# test\niterations = 7\nwarmup=0\npayload-size = 12\n").unwrap();
    let cfg = path.to_str().unwrap();
    let out = bench(&["--config", cfg, "latency", "--server", &loop_uri(), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!((r["iterations"].clone(), r["payload_size"].clone()), (7.into(), 12.into()));
    let out = bench(&["--config", cfg, "latency", "--server", &loop_uri(), "--iters", "9", "--json"]);
    assert_eq!(report(&out)["iterations"], 9);
    std::fs::write(&path, "iterations\n").unwrap();
    assert_eq!(bench(&["--config", cfg, "latency"]).status.code(), Some(2));
    std::fs::remove_file(&path).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bench(&["latency", "--iters", "0"]).status.code(), Some(2));
    assert_eq!(bench(&["latency", "--server", "nonsense"]).status.code(), Some(2));
    assert_eq!(bench(&["latency", "--server", "carrier-pigeon://x"]).status.code(), Some(2));
    assert_eq!(bench(&["bandwidth", "--server", &loop_uri(), "--bulk-size", "0"]).status.code(), Some(2));
    assert_eq!(bench(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bench(&["peers", "--n", "3", "--kill-peer-after", "1"]).status.code(), Some(2));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreachable_server_is_transport_failure() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let out = bench(&["latency", "--server", &format!("tcp://127.0.0.1:{port}"), "--iters", "2", "--json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(report(&out)["status"], "TRANSPORT_ERROR");
}

#[test]
fn silent_server_times_out() {
    // Accepts connections and never answers.
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let hold = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        std::thread::sleep(std::time::Duration::from_secs(2));
        drop(s);
    });
    let out = bench(&[
        "--timeout-ms",
        "300",
        "latency",
        "--server",
        &format!("tcp://127.0.0.1:{port}"),
        "--iters",
        "2",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(report(&out)["status"], "TIMEOUT");
    hold.join().unwrap();
}

#[test]
fn bandwidth_boundary_and_corruption() {
    let server = Server::start();
    let out = bench(&["bandwidth", "--server", &server.uri, "--bulk-size", "1", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!((r["crc_match"].clone(), r["bulk_size"].clone()), (true.into(), 1.into()));

    let out = bench(&["bandwidth", "--server", &server.uri, "--bulk-size", "5000000", "--iters", "3", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["completed"], 3);

    let out = bench(&["bandwidth", "--server", &server.uri, "--bulk-size", "4096", "--corrupt-after-expose", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["status"], "CRC_MISMATCH");
    assert_eq!(r["crc_match"], false);
}

#[test]
fn bandwidth_over_loop() {
    let out = bench(&["bandwidth", "--server", &loop_uri(), "--bulk-size", "3000000", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["crc_match"], true);
}

#[test]
fn serve_exits_zero_on_stop() {
    let mut server = Server::start();
    let out = bench(&["latency", "--server", &server.uri, "--iters", "5", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let class = mrpc::rpc::RpcClass::init_with(None, Default::default()).unwrap();
    let req = class
        .create_context()
        .request_post(
            &mrpc::nal::parse_address(&server.uri).unwrap(),
            mrpc::wire::rpc_id_from_name("stop").unwrap(),
            b"",
        )
        .unwrap();
    assert_eq!(req.wait(std::time::Duration::from_secs(10)).unwrap(), mrpc::rpc::Status::Ok);
    assert!(server.child.wait().unwrap().success());
}

#[test]
fn peers_over_loop() {
    let out = bench(&["peers", "--transport", "loop", "--n", "100", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!((r["completed"].clone(), r["iterations"].clone()), (200.into(), 200.into()));
    assert_eq!(bench(&["peers", "--n", "0"]).status.code(), Some(0));
}

#[test]
fn peers_over_tcp() {
    let out = bench(&["peers", "--transport", "tcp", "--n", "100", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["transport"], "tcp");
    assert_eq!(r["completed"], 200);
}

#[test]
fn killed_peer_is_transport_failure() {
    let out = bench(&[
        "--timeout-ms",
        "2000",
        "peers",
        "--transport",
        "tcp",
        "--n",
        "5000",
        "--kill-peer-after",
        "200",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let r = report(&out);
    assert_eq!(r["status"], "TRANSPORT_ERROR");
    assert!(r["error"].as_str().unwrap().contains("TRANSPORT_ERROR"), "{r}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("TRANSPORT_ERROR"));
}
