use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use helix_registry::PoolPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Exponential inter-arrival times, `rate` requests per second.
    Poisson { rate: f64 },
    /// Arrival times in seconds, one per line.
    Trace { file: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenerationTime {
    Fixed { seconds: f64 },
    /// `exp(N(mu, sigma))` seconds.
    Lognormal { mu: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub arrival: Arrival,
    pub generation_time: GenerationTime,
    pub policy: PoolPolicy,
    /// Seconds.
    pub horizon: f64,
    pub rng_seed: u64,
    #[serde(default = "default_size")]
    pub variant_size_bytes: u64,
    /// Start with the pool already at target.
    #[serde(default = "yes")]
    pub warmup: bool,
    /// Keep the per-event log in the result.
    #[serde(default)]
    pub record_events: bool,
}

fn default_size() -> u64 {
    4096
}

fn yes() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}:{line}: malformed trace: {reason}")]
    Trace { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if let Arrival::Poisson { rate } = self.arrival {
            if !(rate.is_finite() && rate > 0.0) {
                return bad(format!("poisson rate must be positive, got {rate}"));
            }
        }
        match self.generation_time {
            GenerationTime::Fixed { seconds } if !(seconds.is_finite() && seconds >= 0.0) => {
                return bad(format!("fixed generation time must be non-negative, got {seconds}"));
            }
            GenerationTime::Lognormal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) => {
                return bad(format!("lognormal needs finite mu and sigma >= 0, got {mu}, {sigma}"));
            }
            _ => {}
        }
        self.policy.validate().map_err(|e| SimError::Config(e.to_string()))
    }
}

/// Parses a trace: one non-negative time in seconds per line, in
/// non-decreasing order. Blank lines and `#` comments are skipped.
pub fn parse_trace(path: &Path, text: &str) -> Result<Vec<f64>, SimError> {
    let mut out: Vec<f64> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| SimError::Trace { path: path.to_path_buf(), line: k + 1, reason };
        let t: f64 = line.parse().map_err(|_| err(format!("not a number: {line:?}")))?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(err(format!("time must be finite and non-negative, got {t}")));
        }
        if out.last().is_some_and(|&prev| t < prev) {
            return Err(err(format!("time {t} goes backwards")));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<f64>, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    parse_trace(path, &text)
}
