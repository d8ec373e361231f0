#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use mrpc::nal::mock::{self, CallLog};
use mrpc::nal::NalConfig;
use mrpc::rpc::{Context, RpcClass};

static NEXT: AtomicUsize = AtomicUsize::new(0);

pub fn mock_log() -> Arc<CallLog> {
    static LOG: OnceLock<Arc<CallLog>> = OnceLock::new();
    LOG.get_or_init(mock::install).clone()
}

/// Listen URI on `transport` that no other test uses.
pub fn fresh_uri(transport: &str) -> String {
    let n = NEXT.fetch_add(1, Ordering::SeqCst);
    match transport {
        "tcp" => "tcp://127.0.0.1:0".to_string(),
        t => format!("{t}://t{}-{n}", std::process::id()),
    }
}

pub fn class_on(transport: &str) -> RpcClass {
    class_with(transport, NalConfig::default())
}

pub fn class_with(transport: &str, config: NalConfig) -> RpcClass {
    if transport == "mock" {
        mock_log();
    }
    RpcClass::init_with(Some(&fresh_uri(transport)), config).expect("class init")
}

/// Progress and trigger every context until `done` holds; panics after 20 s.
pub fn drive(ctxs: &[&Context], done: impl Fn() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(20);
    while !done() {
        assert!(Instant::now() < deadline, "condition not reached in time");
        for c in ctxs {
            c.progress(Duration::from_millis(1)).unwrap();
            c.trigger(usize::MAX).unwrap();
        }
    }
}

/// Registers an "echo" handler that responds with its input.
pub fn serve_echo(class: &RpcClass) -> mrpc::wire::RpcId {
    class
        .register(
            "echo",
            |h| {
                let input = h.input().unwrap();
                h.respond(&input, |_| {}).unwrap();
            },
            true,
        )
        .unwrap()
}

/// Bitwise CRC-32 (IEEE, reflected), independent of the crate's checksum.
pub fn crc32_reference(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}
