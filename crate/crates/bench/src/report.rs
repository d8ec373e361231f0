use std::time::Duration;

use serde::Serialize;

use crate::config::{BenchConfig, Format};

/// One benchmark result. Every key is always present; fields that do not
/// apply to an operation are `null`. Latencies are in microseconds.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchReport {
    pub operation: String,
    pub transport: String,
    pub server: Option<String>,
    pub iterations: usize,
    pub warmup: usize,
    pub payload_size: usize,
    pub bulk_size: Option<usize>,
    pub eager_limit: usize,
    pub threads: usize,
    pub completed: usize,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub throughput: f64,
    pub throughput_unit: String,
    pub mismatches: usize,
    pub crc_match: Option<bool>,
    pub status: String,
    pub error: Option<String>,
}

/// Exact percentiles from the full sample vector (nearest rank).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Summary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &[Duration]) -> Summary {
    if samples.is_empty() {
        return Summary::default();
    }
    let mut us: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e6).collect();
    us.sort_by(f64::total_cmp);
    Summary {
        p50: percentile(&us, 0.50),
        p90: percentile(&us, 0.90),
        p99: percentile(&us, 0.99),
        mean: us.iter().sum::<f64>() / us.len() as f64,
        min: us[0],
        max: us[us.len() - 1],
    }
}

impl BenchReport {
    pub fn new(operation: &str, cfg: &BenchConfig, server: Option<String>) -> Self {
        Self {
            operation: operation.into(),
            transport: cfg.transport.clone(),
            server,
            iterations: cfg.iterations,
            warmup: cfg.warmup,
            payload_size: cfg.payload_size,
            bulk_size: None,
            eager_limit: cfg.eager_limit,
            threads: cfg.threads,
            completed: 0,
            p50_us: 0.0,
            p90_us: 0.0,
            p99_us: 0.0,
            mean_us: 0.0,
            min_us: 0.0,
            max_us: 0.0,
            throughput: 0.0,
            throughput_unit: "ops/s".into(),
            mismatches: 0,
            crc_match: None,
            status: "OK".into(),
            error: None,
        }
    }

    pub fn set_samples(&mut self, samples: &[Duration]) {
        let s = summarize(samples);
        self.completed = samples.len();
        self.p50_us = s.p50;
        self.p90_us = s.p90;
        self.p99_us = s.p99;
        self.mean_us = s.mean;
        self.min_us = s.min;
        self.max_us = s.max;
    }

    pub fn fail(&mut self, status: &str, error: impl Into<String>) {
        self.status = status.into();
        self.error = Some(error.into());
    }

    pub fn emit(&self, format: Format) {
        match format {
            Format::Json => println!("{}", serde_json::to_string(self).expect("report serializes")),
            Format::Human => {
                println!("{} over {} ({})", self.operation, self.transport, self.status);
                if let Some(s) = &self.server {
                    println!("  server       {s}");
                }
                println!("  completed    {}/{}", self.completed, self.iterations);
                println!(
                    "  latency us   p50 {:.1}  p90 {:.1}  p99 {:.1}  mean {:.1}",
                    self.p50_us, self.p90_us, self.p99_us, self.mean_us
                );
                println!("  throughput   {:.1} {}", self.throughput, self.throughput_unit);
                println!("  mismatches   {}", self.mismatches);
                if let Some(m) = self.crc_match {
                    println!("  crc match    {m}");
                }
                if let Some(e) = &self.error {
                    println!("  error        {e}");
                }
            }
        }
    }
}
