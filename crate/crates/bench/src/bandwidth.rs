use std::time::{Duration, Instant};

use mrpc::bulk::BulkHandle;
use mrpc::nal::{MemRegion, Permission};
use mrpc::rpc::{RpcError, Status};
use mrpc::wire::{checksum, rpc_id_from_name};
use rand::RngCore;

use crate::client::{client_class, local_server_for, parse_server, status_failure, TriggerPool};
use crate::config::BenchConfig;
use crate::report::BenchReport;
use crate::serve::{decode_sink_reply, BULK_SINK};
use crate::Failure;

/// Floor used to scale the reply timeout with the transfer size.
const MIN_RATE: f64 = 8.0 * 1024.0 * 1024.0;

/// Exposes `bulk_size` random bytes and asks the server to pull them and
/// return their CRC. `corrupt` flips a byte after the CRC was taken, to
/// exercise the mismatch path.
pub fn run(cfg: &BenchConfig, server_uri: &str, corrupt: bool) -> (BenchReport, Option<Failure>) {
    let mut report = BenchReport::new("bandwidth", cfg, Some(server_uri.to_string()));
    report.bulk_size = Some(cfg.bulk_size);
    report.throughput_unit = "bytes/s".into();
    match measure(cfg, server_uri, corrupt, &mut report) {
        Ok(()) => (report, None),
        Err((status, failure)) => {
            report.fail(status, failure.message());
            (report, Some(failure))
        }
    }
}

fn measure(
    cfg: &BenchConfig,
    server_uri: &str,
    corrupt: bool,
    report: &mut BenchReport,
) -> Result<(), (&'static str, Failure)> {
    let setup = |f: Failure| ("SETUP", f);
    if cfg.bulk_size == 0 {
        return Err(setup(Failure::Usage("bulk size must be at least 1 byte".into())));
    }
    let server = parse_server(server_uri).map_err(setup)?;
    report.transport = server.plugin().to_string();
    let _local = local_server_for(&server, cfg.eager_limit, 1).map_err(setup)?;
    let class = client_class(&server, cfg.eager_limit, true).map_err(setup)?;
    let ctx = class.create_context();
    let _pool = TriggerPool::start(&ctx, cfg.threads);
    let id = rpc_id_from_name(BULK_SINK).expect("static name");
    let timeout = Duration::from_millis(cfg.timeout_ms) + Duration::from_secs_f64(cfg.bulk_size as f64 / MIN_RATE);
    let mut rng = rand::thread_rng();
    let mut samples = Vec::new();
    let mut moved = 0u64;
    let mut measured = Duration::ZERO;
    report.crc_match = Some(true);

    for i in 0..cfg.warmup + cfg.iterations {
        let mut data = vec![0u8; cfg.bulk_size];
        rng.fill_bytes(&mut data);
        let expected = checksum(&data).0;
        let region = MemRegion::from_vec(data);
        let handle = BulkHandle::create(&class, vec![region.clone()], Permission::Read)
            .map_err(|e| ("SETUP", Failure::Transport(e.to_string())))?;
        if corrupt {
            region.write(|b| b[0] ^= 0xA5);
        }
        let desc = handle.serialize().expect("local handle");
        let start = Instant::now();
        let req = ctx
            .request_post_with_bulk(&server, id, b"", &desc)
            .map_err(|e| ("TRANSPORT_ERROR", Failure::Transport(e.to_string())))?;
        let status = match req.wait(timeout) {
            Ok(s) => s,
            Err(RpcError::Timeout) => {
                let _ = req.cancel();
                return Err(("TIMEOUT", Failure::Transport(format!("no reply from {server} within {timeout:?}"))));
            }
            Err(e) => return Err(("TRANSPORT_ERROR", Failure::Transport(e.to_string()))),
        };
        let elapsed = start.elapsed();
        let _ = handle.free();
        if status != Status::Ok {
            return Err((status.name(), status_failure(status, "bulk_sink")));
        }
        let reply = req.output().ok().and_then(|o| decode_sink_reply(&o));
        let Some((pull_status, crc)) = reply else {
            return Err(("DECODE_ERROR", Failure::Correctness("malformed bulk_sink reply".into())));
        };
        if pull_status != Status::Ok {
            return Err((pull_status.name(), status_failure(pull_status, "server pull")));
        }
        if crc != expected {
            report.crc_match = Some(false);
            report.mismatches += 1;
            return Err((
                "CRC_MISMATCH",
                Failure::Correctness(format!("CRC_MISMATCH: server saw {crc:08x}, expected {expected:08x}")),
            ));
        }
        if i >= cfg.warmup {
            samples.push(elapsed);
            measured += elapsed;
            moved += cfg.bulk_size as u64;
        }
    }
    report.set_samples(&samples);
    report.throughput = moved as f64 / measured.as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(())
}
