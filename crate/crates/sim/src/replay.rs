//! Replays an arrival trace against a live registry and compares the
//! observed uniqueness with the simulated one.
//!
//! Trace times are simulated seconds; the replay waits `t * time_scale`
//! real seconds before request `t`. The server's generation delay should
//! be the simulated generation time times the same scale.

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use helix_core::isa::ProgramImage;
use helix_core::transforms::PipelineSpec;
use helix_registry::client::{ClientError, RegistryClient};
use helix_registry::{PoolPolicy, VariantState};

use crate::config::{SimConfig, SimError};
use crate::engine::{simulate_with_arrivals, SimResult};

pub const DEFAULT_TOLERANCE: f64 = 0.03;

#[derive(Clone, Debug)]
pub struct ReplayOptions {
    pub image_name: String,
    pub image: ProgramImage,
    pub pipeline: PipelineSpec,
    pub time_scale: f64,
    pub tolerance: f64,
    /// How long to wait for the warm pool to fill.
    pub warmup_timeout: Duration,
    /// Put this policy instead of the simulated one.
    pub live_policy: Option<PoolPolicy>,
}

impl ReplayOptions {
    pub fn new(image_name: &str, image: ProgramImage, pipeline: PipelineSpec, time_scale: f64) -> ReplayOptions {
        ReplayOptions {
            image_name: image_name.to_string(),
            image,
            pipeline,
            time_scale,
            tolerance: DEFAULT_TOLERANCE,
            warmup_timeout: Duration::from_secs(30),
            live_policy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveResult {
    pub requests: u64,
    pub served: u64,
    pub rejected: u64,
    pub unique: u64,
    pub uniqueness_ratio: f64,
    pub empty_pool_events: u64,
    pub pool_empty_fraction: f64,
    /// Mean real generation time reported by the server.
    pub generation_mean_ms: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub live: LiveResult,
    pub simulated: SimResult,
    /// Absolute difference of the uniqueness ratios.
    pub divergence: f64,
    /// Absolute difference of the empty-pool fractions.
    pub pool_empty_divergence: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("invalid replay: {0}")]
    Options(String),
    #[error("pool for {0:?} did not fill within the warmup timeout")]
    WarmupTimeout(String),
}

fn scaled(policy: &PoolPolicy, scale: f64) -> PoolPolicy {
    PoolPolicy { variant_ttl: policy.variant_ttl.map(|t| t.mul_f64(scale)), ..policy.clone() }
}

fn wait_for_pool(client: &RegistryClient, name: &str, target: usize, timeout: Duration) -> Result<(), ReplayError> {
    let deadline = Instant::now() + timeout;
    loop {
        let m = client.metrics(name)?;
        if m.variant_counts.get(&VariantState::Fresh).copied().unwrap_or(0) >= target {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(ReplayError::WarmupTimeout(name.to_string()));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Puts the image with `config.policy`, replays `times` and simulates the
/// same trace.
pub fn replay(
    client: &RegistryClient,
    config: &SimConfig,
    times: &[f64],
    opts: &ReplayOptions,
) -> Result<ReplayReport, ReplayError> {
    if !(opts.time_scale.is_finite() && opts.time_scale > 0.0) {
        return Err(ReplayError::Options(format!("time scale must be positive, got {}", opts.time_scale)));
    }
    let simulated = simulate_with_arrivals(config, times)?;

    let policy = scaled(opts.live_policy.as_ref().unwrap_or(&config.policy), opts.time_scale);
    client.put_image(&opts.image_name, &opts.image, &opts.pipeline, Some(&policy))?;
    if config.warmup {
        wait_for_pool(client, &opts.image_name, policy.target_pool_size as usize, opts.warmup_timeout)?;
    }

    let mut live = LiveResult {
        requests: 0,
        served: 0,
        rejected: 0,
        unique: 0,
        uniqueness_ratio: 1.0,
        empty_pool_events: 0,
        pool_empty_fraction: 0.0,
        generation_mean_ms: 0.0,
        wall_secs: 0.0,
    };
    let start = Instant::now();
    for &t in times.iter().filter(|&&t| t <= config.horizon) {
        let due = start + Duration::from_secs_f64(t * opts.time_scale);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        live.requests += 1;
        match client.acquire(&opts.image_name) {
            Ok(got) => {
                live.served += 1;
                live.unique += u64::from(got.unique);
            }
            Err(e) if e.code() == Some("pool_exhausted") => live.rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    live.wall_secs = start.elapsed().as_secs_f64();

    let m = client.metrics(&opts.image_name)?;
    live.empty_pool_events = m.empty_pool_events;
    live.generation_mean_ms = m.generation.mean_ms;
    if live.served > 0 {
        live.uniqueness_ratio = live.unique as f64 / live.served as f64;
    }
    if live.requests > 0 {
        live.pool_empty_fraction = live.empty_pool_events as f64 / live.requests as f64;
    }

    let divergence = (live.uniqueness_ratio - simulated.uniqueness_ratio).abs();
    let pool_empty_divergence = (live.pool_empty_fraction - simulated.pool_empty_fraction).abs();
    let within_tolerance = divergence.max(pool_empty_divergence) <= opts.tolerance;
    Ok(ReplayReport { live, simulated, divergence, pool_empty_divergence, tolerance: opts.tolerance, within_tolerance })
}
