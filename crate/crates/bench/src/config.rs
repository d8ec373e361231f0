//! Settings resolution: command-line flags, then `BENCH_EAGER_LIMIT`, then the
//! key=value config file, then built-in defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use mrpc::wire::DEFAULT_EAGER_LIMIT;

use crate::Failure;

pub const EAGER_ENV: &str = "BENCH_EAGER_LIMIT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Human,
    Json,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub transport: String,
    pub iterations: usize,
    pub payload_size: usize,
    pub bulk_size: usize,
    pub eager_limit: usize,
    pub warmup: usize,
    pub format: Format,
    pub threads: usize,
    pub timeout_ms: u64,
}

/// Flat `key = value` file; `#` starts a comment.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::Usage(format!("config line {}: expected key=value", n + 1)));
            };
            values.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::Usage(format!("config key {key}: bad value {v:?}"))),
        }
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub transport: Option<String>,
    pub iterations: Option<usize>,
    pub payload_size: Option<usize>,
    pub bulk_size: Option<usize>,
    pub eager_limit: Option<usize>,
    pub warmup: Option<usize>,
    pub json: bool,
    pub threads: Option<usize>,
    pub timeout_ms: Option<u64>,
}

fn env_eager() -> Result<Option<usize>, Failure> {
    match std::env::var(EAGER_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{EAGER_ENV}: bad value {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl BenchConfig {
    pub fn resolve(flags: &Overrides, file: &ConfigFile) -> Result<Self, Failure> {
        Self::resolve_for(flags, file, 1000, 10)
    }

    /// Like [`BenchConfig::resolve`] with command-specific fallbacks for
    /// `iterations` and `warmup`.
    pub fn resolve_for(flags: &Overrides, file: &ConfigFile, iterations: usize, warmup: usize) -> Result<Self, Failure> {
        let format = if flags.json {
            Format::Json
        } else {
            match file.get::<String>("format")?.as_deref() {
                None | Some("human") => Format::Human,
                Some("json") => Format::Json,
                Some(other) => return Err(Failure::Usage(format!("unknown format {other:?}"))),
            }
        };
        let eager_limit = match flags.eager_limit {
            Some(v) => v,
            None => match env_eager()? {
                Some(v) => v,
                None => file.get("eager_limit")?.unwrap_or(DEFAULT_EAGER_LIMIT),
            },
        };
        let cfg = Self {
            transport: flags
                .transport
                .clone()
                .or(file.get("transport")?)
                .unwrap_or_else(|| "loop".into()),
            iterations: flags.iterations.or(file.get("iterations")?).unwrap_or(iterations),
            payload_size: flags.payload_size.or(file.get("payload_size")?).unwrap_or(0),
            bulk_size: flags.bulk_size.or(file.get("bulk_size")?).unwrap_or(1 << 20),
            eager_limit,
            warmup: flags.warmup.or(file.get("warmup")?).unwrap_or(warmup),
            format,
            threads: flags.threads.or(file.get("threads")?).unwrap_or(1),
            timeout_ms: flags.timeout_ms.or(file.get("timeout_ms")?).unwrap_or(10_000),
        };
        if cfg.iterations == 0 {
            return Err(Failure::Usage("iterations must be at least 1".into()));
        }
        if cfg.threads == 0 {
            return Err(Failure::Usage("threads must be at least 1".into()));
        }
        if cfg.eager_limit < 16 {
            return Err(Failure::Usage("eager limit must be at least 16 bytes".into()));
        }
        Ok(cfg)
    }
}
