use std::time::{Duration, Instant};

use mrpc::rpc::{RpcError, Status};
use mrpc::wire::rpc_id_from_name;
use rand::RngCore;

use crate::client::{client_class, local_server_for, parse_server, status_failure, TriggerPool};
use crate::config::BenchConfig;
use crate::report::BenchReport;
use crate::serve::ECHO;
use crate::Failure;

/// Echo round trips of `payload_size` random bytes; every reply is compared
/// with what was sent.
pub fn run(cfg: &BenchConfig, server_uri: &str) -> (BenchReport, Option<Failure>) {
    let mut report = BenchReport::new("latency", cfg, Some(server_uri.to_string()));
    match measure(cfg, server_uri, &mut report) {
        Ok(()) => (report, None),
        Err((status, failure)) => {
            report.fail(status, failure.message());
            (report, Some(failure))
        }
    }
}

fn measure(cfg: &BenchConfig, server_uri: &str, report: &mut BenchReport) -> Result<(), (&'static str, Failure)> {
    let setup = |f: Failure| ("SETUP", f);
    let server = parse_server(server_uri).map_err(setup)?;
    report.transport = server.plugin().to_string();
    let _local = local_server_for(&server, cfg.eager_limit, 1).map_err(setup)?;
    let class = client_class(&server, cfg.eager_limit, false).map_err(setup)?;
    let ctx = class.create_context();
    let _pool = TriggerPool::start(&ctx, cfg.threads);
    let id = rpc_id_from_name(ECHO).expect("static name");
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let mut rng = rand::thread_rng();
    let mut payload = vec![0u8; cfg.payload_size];
    let mut samples = Vec::with_capacity(cfg.iterations);
    let mut measured = Duration::ZERO;

    for i in 0..cfg.warmup + cfg.iterations {
        rng.fill_bytes(&mut payload);
        let start = Instant::now();
        let req = match ctx.request_post(&server, id, &payload) {
            Ok(r) => r,
            Err(RpcError::Oversize { len, limit }) => {
                return Err((
                    "OVERSIZE",
                    Failure::Usage(format!(
                        "OVERSIZE: request of {len} bytes exceeds the eager limit of {limit} bytes; \
                         move large data to the bulk path (bench bandwidth)"
                    )),
                ))
            }
            Err(e) => return Err(("TRANSPORT_ERROR", Failure::Transport(e.to_string()))),
        };
        let status = match req.wait(timeout) {
            Ok(s) => s,
            Err(RpcError::Timeout) => {
                let _ = req.cancel();
                report.set_samples(&samples);
                return Err(("TIMEOUT", Failure::Transport(format!("no reply from {server} within {timeout:?}"))));
            }
            Err(e) => return Err(("TRANSPORT_ERROR", Failure::Transport(e.to_string()))),
        };
        let elapsed = start.elapsed();
        if status != Status::Ok {
            report.set_samples(&samples);
            return Err((status.name(), status_failure(status, "echo")));
        }
        if req.output().ok().as_deref() != Some(&payload[..]) {
            report.mismatches += 1;
        }
        if i >= cfg.warmup {
            samples.push(elapsed);
            measured += elapsed;
        }
    }
    report.set_samples(&samples);
    report.throughput = samples.len() as f64 / measured.as_secs_f64().max(f64::MIN_POSITIVE);
    if report.mismatches > 0 {
        return Err((
            "MISMATCH",
            Failure::Correctness(format!("{} echoed payloads differed from the request", report.mismatches)),
        ));
    }
    Ok(())
}
