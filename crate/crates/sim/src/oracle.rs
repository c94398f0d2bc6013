//! A deliberately plain reference model for one family of configurations:
//! Poisson arrivals, fixed generation time, reuse-on-empty, no TTL, warm
//! pool. It walks requests one by one and shares no code with the event
//! engine.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use helix_registry::{Limit, OnEmpty, PoolPolicy};

use crate::config::{Arrival, GenerationTime, SimConfig};

#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub rate: f64,
    pub generation_secs: f64,
    pub pool: usize,
    pub parallelism: usize,
    /// `None` means unlimited.
    pub max_deploys: Option<u32>,
    pub requests: usize,
    pub seed: u64,
}

impl OracleConfig {
    /// The same setup as an engine config, with a horizon that covers
    /// about `requests` arrivals.
    pub fn to_sim_config(&self) -> SimConfig {
        SimConfig {
            arrival: Arrival::Poisson { rate: self.rate },
            generation_time: GenerationTime::Fixed { seconds: self.generation_secs },
            policy: PoolPolicy {
                target_pool_size: self.pool as u32,
                max_deploys_per_variant: self.max_deploys.map_or(Limit::Unlimited, Limit::Count),
                variant_ttl: None,
                generator_parallelism: self.parallelism as u32,
                on_empty: OnEmpty::ReuseLeastDeployed,
            },
            horizon: self.requests as f64 / self.rate,
            rng_seed: self.seed,
            variant_size_bytes: 4096,
            warmup: true,
            record_events: false,
        }
    }
}

/// Five configurations whose repeat probability is well away from 0 and 1.
pub fn reference_configs() -> Vec<OracleConfig> {
    let base = OracleConfig {
        rate: 10.0,
        generation_secs: 0.5,
        pool: 4,
        parallelism: 1,
        max_deploys: None,
        requests: 20_000,
        seed: 0,
    };
    vec![
        OracleConfig { seed: 1, ..base },
        OracleConfig { max_deploys: Some(2), seed: 2, ..base },
        OracleConfig { max_deploys: Some(3), parallelism: 2, seed: 3, ..base },
        OracleConfig { rate: 4.0, pool: 8, parallelism: 2, seed: 4, ..base },
        OracleConfig { rate: 20.0, generation_secs: 0.2, pool: 2, parallelism: 4, max_deploys: Some(4), seed: 5, ..base },
    ]
}

/// Returns the probability that a request is served a variant that was
/// already deployed before.
pub fn repeat_serve_probability(c: &OracleConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut fresh = c.pool;
    let mut pending: VecDeque<f64> = VecDeque::new();
    // live deployed variants as (deploy count, id), least deployed on top
    let mut deployed: BinaryHeap<Reverse<(u32, u64)>> = BinaryHeap::new();
    let mut next_id = 0u64;
    let (mut unique, mut served) = (0u64, 0u64);
    let mut t = 0.0;

    let refill = |now: f64, fresh: usize, pending: &mut VecDeque<f64>| {
        while fresh + pending.len() < c.pool && pending.len() < c.parallelism {
            pending.push_back(now + c.generation_secs);
        }
    };

    for _ in 0..c.requests {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / c.rate;
        while pending.front().is_some_and(|&done| done <= t) {
            let done = pending.pop_front().unwrap();
            fresh += 1;
            refill(done, fresh, &mut pending);
        }
        if fresh > 0 {
            fresh -= 1;
            unique += 1;
            served += 1;
            next_id += 1;
            if c.max_deploys != Some(1) {
                deployed.push(Reverse((1, next_id)));
            }
        } else if let Some(Reverse((count, id))) = deployed.pop() {
            served += 1;
            if !c.max_deploys.is_some_and(|m| count + 1 >= m) {
                deployed.push(Reverse((count + 1, id)));
            }
        }
        refill(t, fresh, &mut pending);
    }
    if served == 0 {
        0.0
    } else {
        1.0 - unique as f64 / served as f64
    }
}
