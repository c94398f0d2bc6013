use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::{Condvar, Mutex};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use helix_core::isa::ProgramImage;
use helix_core::lifter::lift;
use helix_core::transforms::{compose, PipelineSpec};

use crate::generator::Generator;
use crate::metrics::{DurationStats, ImageMetrics, RegistryMetrics};
use crate::policy::{OnEmpty, PolicyError, PoolPolicy};
use crate::store::{Manifest, Store};
use crate::variant::{Millis, Transition, Variant, VariantState};

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as Millis)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Millis) -> ManualClock {
        ManualClock(AtomicU64::new(start))
    }
    pub fn set(&self, t: Millis) {
        self.0.store(t, Ordering::SeqCst);
    }
    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replenish {
    /// Generation threads start whenever a pool drops below target.
    Background,
    /// Pools only grow on [`Registry::replenish_now`].
    Manual,
}

#[derive(Clone, Debug)]
pub struct RegistryOptions {
    pub replenish: Replenish,
    /// Seeds selection and master-seed draws; from the OS when absent.
    pub rng_seed: Option<u64>,
    pub record_transitions: bool,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        RegistryOptions { replenish: Replenish::Background, rng_seed: None, record_transitions: false }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("pool exhausted for image {0:?}")]
    PoolExhausted(String),
    #[error("invalid image name {0:?}")]
    InvalidName(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error(transparent)]
    InvalidPolicy(#[from] PolicyError),
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
}

impl RegistryError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::UnknownImage(_) => "unknown_image",
            RegistryError::PoolExhausted(_) => "pool_exhausted",
            RegistryError::InvalidName(_) => "invalid_name",
            RegistryError::InvalidImage(_) => "invalid_image",
            RegistryError::InvalidPipeline(_) => "invalid_pipeline",
            RegistryError::InvalidPolicy(_) => "invalid_policy",
            RegistryError::Storage(_) => "storage",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Acquired {
    pub variant: Variant,
    /// Whether this response was the variant's first deploy.
    pub unique: bool,
    pub image: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PutReceipt {
    pub name: String,
    pub replaced: bool,
    pub expired: usize,
}

#[derive(Debug, Default)]
struct Stats {
    acquire_count: u64,
    unique_count: u64,
    rejected_count: u64,
    empty_pool_events: u64,
    generated: u64,
    generation_failures: u64,
    last_failure: Option<String>,
    durations_ms: Vec<f64>,
    since: Millis,
}

struct ImageEntry {
    name: String,
    base: Arc<ProgramImage>,
    pipeline: PipelineSpec,
    policy: PoolPolicy,
    epoch: u64,
    variants: BTreeMap<u64, Variant>,
    fresh: Vec<u64>,
    /// Fresh and deployed ids.
    live: BTreeSet<u64>,
    used_seeds: HashSet<u64>,
    in_flight: u32,
    stats: Stats,
}

impl ImageEntry {
    fn manifest(&self) -> Manifest {
        let mut used_seeds: Vec<u64> = self.used_seeds.iter().copied().collect();
        used_seeds.sort();
        Manifest {
            name: self.name.clone(),
            base_image: B64.encode(self.base.to_bytes()),
            pipeline: self.pipeline.clone(),
            policy: self.policy.clone(),
            used_seeds,
            variants: self.variants.values().cloned().collect(),
        }
    }
}

struct Job {
    name: String,
    epoch: u64,
    variant_id: u64,
    base: Arc<ProgramImage>,
    spec: PipelineSpec,
}

struct Inner {
    images: BTreeMap<String, ImageEntry>,
    store: Store,
    rng: StdRng,
    next_variant_id: u64,
    transitions: Vec<Transition>,
}

impl Inner {
    fn transition(&mut self, name: &str, id: u64, to: VariantState, record: bool) {
        let v = self.images.get_mut(name).and_then(|e| e.variants.get_mut(&id)).expect("variant exists");
        let from = v.state;
        assert!(from.can_become(to), "illegal transition {from:?} -> {to:?} for variant {id}");
        v.state = to;
        if record {
            self.transitions.push(Transition { variant_id: id, from, to });
        }
    }

    /// Moves a servable variant to expired and drops its blob.
    fn expire(&mut self, name: &str, id: u64, record: bool) -> io::Result<()> {
        self.transition(name, id, VariantState::Expired, record);
        let entry = self.images.get_mut(name).expect("image exists");
        entry.fresh.retain(|&f| f != id);
        entry.live.remove(&id);
        if let Some(digest) = entry.variants[&id].digest.clone() {
            self.store.release_blob(name, &digest)?;
        }
        Ok(())
    }

    fn persist(&self, name: &str) -> io::Result<()> {
        match self.images.get(name) {
            Some(entry) if self.store.root().is_some() => self.store.write_manifest(&entry.manifest()),
            _ => Ok(()),
        }
    }

    fn sweep_image(&mut self, name: &str, now: Millis, record: bool) -> io::Result<usize> {
        let Some(entry) = self.images.get(name) else { return Ok(0) };
        let Some(ttl) = entry.policy.variant_ttl else { return Ok(0) };
        let ttl = ttl.as_millis() as u64;
        let stale: Vec<u64> = entry
            .live
            .iter()
            .map(|id| &entry.variants[id])
            .filter(|v| now.saturating_sub(v.created_at) >= ttl)
            .map(|v| v.variant_id)
            .collect();
        for &id in &stale {
            self.expire(name, id, record)?;
        }
        Ok(stale.len())
    }

    fn fresh_seed(&mut self, name: &str) -> u64 {
        loop {
            let seed: u64 = self.rng.random();
            if self.images.get_mut(name).expect("image exists").used_seeds.insert(seed) {
                return seed;
            }
        }
    }

    fn plan(&mut self, name: &str, now: Millis) -> Vec<Job> {
        let mut jobs = Vec::new();
        while let Some(entry) = self.images.get(name) {
            let want = entry.fresh.len() as u32 + entry.in_flight < entry.policy.target_pool_size;
            if !want || entry.in_flight >= entry.policy.generator_parallelism {
                break;
            }
            let seed = self.fresh_seed(name);
            let variant_id = self.next_variant_id;
            self.next_variant_id += 1;
            let entry = self.images.get_mut(name).expect("image exists");
            entry.in_flight += 1;
            entry.variants.insert(
                variant_id,
                Variant {
                    variant_id,
                    image_name: name.to_string(),
                    master_seed: seed,
                    digest: None,
                    state: VariantState::Generating,
                    deploy_count: 0,
                    created_at: now,
                    last_deployed_at: None,
                    generation_duration_ms: 0.0,
                    size_bytes: 0,
                },
            );
            jobs.push(Job {
                name: name.to_string(),
                epoch: entry.epoch,
                variant_id,
                base: entry.base.clone(),
                spec: entry.pipeline.with_seed(seed),
            });
        }
        jobs
    }
}

/// The hardened registry: base images, their variant pools, and the
/// policy that serves and retires variants.
pub struct Registry {
    inner: Mutex<Inner>,
    changed: Condvar,
    generator: Arc<dyn Generator>,
    clock: Arc<dyn Clock>,
    options: RegistryOptions,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub(crate) fn duration_stats(mut ms: Vec<f64>) -> DurationStats {
    ms.sort_by(f64::total_cmp);
    let count = ms.len();
    let mean = if count == 0 { 0.0 } else { ms.iter().sum::<f64>() / count as f64 };
    DurationStats {
        count,
        mean_ms: mean,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        p99_ms: percentile(&ms, 99.0),
        max_ms: ms.last().copied().unwrap_or(0.0),
    }
}

impl Registry {
    pub fn new(generator: Arc<dyn Generator>, clock: Arc<dyn Clock>, options: RegistryOptions) -> Arc<Registry> {
        Self::with_store(Store::in_memory(), generator, clock, options)
    }

    fn with_store(
        store: Store,
        generator: Arc<dyn Generator>,
        clock: Arc<dyn Clock>,
        options: RegistryOptions,
    ) -> Arc<Registry> {
        let rng = match options.rng_seed {
            Some(seed) => StdRng::seed_from_u64(seed),
            None => StdRng::from_os_rng(),
        };
        let inner = Inner { images: BTreeMap::new(), store, rng, next_variant_id: 1, transitions: Vec::new() };
        Arc::new(Registry { inner: Mutex::new(inner), changed: Condvar::new(), generator, clock, options })
    }

    /// Opens (or creates) an on-disk registry and replays its manifests.
    /// Variants that were still generating are dropped; fresh or deployed
    /// ones whose blob is gone are expired.
    pub fn open(
        root: &Path,
        generator: Arc<dyn Generator>,
        clock: Arc<dyn Clock>,
        options: RegistryOptions,
    ) -> Result<Arc<Registry>, RegistryError> {
        let mut store = Store::on_disk(root)?;
        let manifests = store.recover()?;
        let registry = Self::with_store(Store::in_memory(), generator, clock, options);
        {
            let mut g = registry.inner.lock();
            let mut max_id = 0;
            for m in manifests {
                let bytes = B64.decode(&m.base_image).map_err(|e| RegistryError::InvalidImage(e.to_string()))?;
                let base = ProgramImage::from_bytes(&bytes).map_err(|e| RegistryError::InvalidImage(e.to_string()))?;
                let mut entry = ImageEntry {
                    name: m.name.clone(),
                    base: Arc::new(base),
                    pipeline: m.pipeline,
                    policy: m.policy,
                    epoch: 0,
                    variants: BTreeMap::new(),
                    fresh: Vec::new(),
                    live: BTreeSet::new(),
                    used_seeds: m.used_seeds.into_iter().collect(),
                    in_flight: 0,
                    stats: Stats { since: registry.clock.now(), ..Stats::default() },
                };
                for mut v in m.variants {
                    max_id = max_id.max(v.variant_id);
                    if v.state == VariantState::Generating {
                        continue;
                    }
                    if v.state.servable() && !v.digest.as_ref().is_some_and(|d| store.adopt_blob(&m.name, d)) {
                        v.state = VariantState::Expired;
                    }
                    if v.state == VariantState::Fresh {
                        entry.fresh.push(v.variant_id);
                    }
                    if v.state.servable() {
                        entry.live.insert(v.variant_id);
                    }
                    entry.stats.generated += 1;
                    entry.stats.durations_ms.push(v.generation_duration_ms);
                    entry.stats.acquire_count += u64::from(v.deploy_count);
                    entry.stats.unique_count += u64::from(v.deploy_count > 0);
                    entry.variants.insert(v.variant_id, v);
                }
                store.prune_orphans(&m.name)?;
                g.images.insert(m.name, entry);
            }
            g.next_variant_id = max_id + 1;
            g.store = store;
            let names: Vec<String> = g.images.keys().cloned().collect();
            for name in &names {
                g.persist(name)?;
            }
        }
        for name in registry.image_names() {
            registry.kick(&name);
        }
        Ok(registry)
    }

    pub fn image_names(&self) -> Vec<String> {
        self.inner.lock().images.keys().cloned().collect()
    }

    /// Stores a base image with its pipeline template and policy. The
    /// pipeline is run once up front so that an image it refuses is
    /// rejected here rather than in the background. Re-putting a name
    /// replaces the base and expires every existing variant.
    pub fn put_image(
        self: &Arc<Self>,
        name: &str,
        image: ProgramImage,
        pipeline: PipelineSpec,
        policy: PoolPolicy,
    ) -> Result<PutReceipt, RegistryError> {
        if !valid_name(name) {
            return Err(RegistryError::InvalidName(name.to_string()));
        }
        policy.validate()?;
        image.check().map_err(RegistryError::InvalidImage)?;
        let ir = lift(&image).map_err(|e| RegistryError::InvalidImage(e.to_string()))?;
        compose(&pipeline, ir).map_err(|e| RegistryError::InvalidPipeline(e.to_string()))?;

        let record = self.options.record_transitions;
        let now = self.clock.now();
        let receipt = {
            let mut g = self.inner.lock();
            let (replaced, expired, epoch, used_seeds) = match g.images.get(name) {
                Some(old) => {
                    let live: Vec<u64> = old.live.iter().copied().collect();
                    let (epoch, seeds) = (old.epoch + 1, old.used_seeds.clone());
                    for &id in &live {
                        g.expire(name, id, record)?;
                    }
                    (true, live.len(), epoch, seeds)
                }
                None => (false, 0, 0, HashSet::new()),
            };
            let old_variants = g.images.remove(name).map(|e| e.variants).unwrap_or_default();
            g.images.insert(
                name.to_string(),
                ImageEntry {
                    name: name.to_string(),
                    base: Arc::new(image),
                    pipeline,
                    policy,
                    epoch,
                    variants: old_variants,
                    fresh: Vec::new(),
                    live: BTreeSet::new(),
                    used_seeds,
                    in_flight: 0,
                    stats: Stats { since: now, ..Stats::default() },
                },
            );
            g.persist(name)?;
            PutReceipt { name: name.to_string(), replaced, expired }
        };
        self.changed.notify_all();
        self.kick(name);
        Ok(receipt)
    }

    /// Serves one variant: uniform among fresh ones, otherwise per the
    /// policy's `on_empty`. Variants past their TTL are retired first.
    pub fn acquire(self: &Arc<Self>, name: &str) -> Result<Acquired, RegistryError> {
        let record = self.options.record_transitions;
        let now = self.clock.now();
        let result = {
            let mut g = self.inner.lock();
            if !g.images.contains_key(name) {
                return Err(RegistryError::UnknownImage(name.to_string()));
            }
            g.sweep_image(name, now, record)?;
            let inner = &mut *g;
            let entry = inner.images.get_mut(name).expect("checked");
            let chosen = if entry.fresh.is_empty() {
                entry.stats.empty_pool_events += 1;
                let reuse = match entry.policy.on_empty {
                    OnEmpty::Reject => None,
                    OnEmpty::ReuseLeastDeployed => entry
                        .live
                        .iter()
                        .map(|id| &entry.variants[id])
                        .filter(|v| v.state == VariantState::Deployed)
                        .min_by_key(|v| (v.deploy_count, v.variant_id))
                        .map(|v| v.variant_id),
                };
                if reuse.is_none() {
                    entry.stats.rejected_count += 1;
                }
                reuse
            } else {
                let k = inner.rng.random_range(0..entry.fresh.len());
                Some(entry.fresh.swap_remove(k))
            };
            match chosen {
                None => Err(RegistryError::PoolExhausted(name.to_string())),
                Some(id) => {
                    g.transition(name, id, VariantState::Deployed, record);
                    let entry = g.images.get_mut(name).expect("checked");
                    let v = entry.variants.get_mut(&id).expect("chosen exists");
                    v.deploy_count += 1;
                    v.last_deployed_at = Some(now);
                    let unique = v.deploy_count == 1;
                    let variant = v.clone();
                    entry.stats.acquire_count += 1;
                    entry.stats.unique_count += u64::from(unique);
                    let limit_hit = entry.policy.max_deploys_per_variant.reached(variant.deploy_count);
                    let digest = variant.digest.clone().expect("servable variants have digests");
                    let image = g.store.get_blob(name, &digest)?;
                    if limit_hit {
                        g.expire(name, id, record)?;
                    }
                    g.persist(name)?;
                    Ok(Acquired { variant, unique, image })
                }
            }
        };
        self.changed.notify_all();
        self.kick(name);
        result
    }

    /// Retires every servable variant, across all images, whose age has
    /// reached its policy TTL.
    pub fn expire_sweep(self: &Arc<Self>, now: Millis) -> Result<usize, RegistryError> {
        let record = self.options.record_transitions;
        let mut total = 0;
        let names = self.image_names();
        {
            let mut g = self.inner.lock();
            for name in &names {
                let n = g.sweep_image(name, now, record)?;
                if n > 0 {
                    g.persist(name)?;
                }
                total += n;
            }
        }
        self.changed.notify_all();
        for name in &names {
            self.kick(name);
        }
        Ok(total)
    }

    fn run_job(&self, job: Job) {
        let started = Instant::now();
        let result = self.generator.generate(&job.base, &job.spec);
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let record = self.options.record_transitions;

        let mut g = self.inner.lock();
        let Some(entry) = g.images.get_mut(&job.name) else { return };
        let current = entry.epoch == job.epoch;
        if current {
            entry.in_flight -= 1;
        }
        let outcome: io::Result<()> = match result {
            Ok(image) => {
                let bytes = image.to_bytes();
                let digest = image.digest_hex();
                let v = entry.variants.get_mut(&job.variant_id).expect("planned variant");
                v.digest = Some(digest.clone());
                v.size_bytes = bytes.len() as u64;
                v.generation_duration_ms = elapsed_ms;
                entry.stats.generated += 1;
                entry.stats.durations_ms.push(elapsed_ms);
                g.store.put_blob(&job.name, &digest, &bytes).and_then(|()| {
                    g.transition(&job.name, job.variant_id, VariantState::Fresh, record);
                    if current {
                        let entry = g.images.get_mut(&job.name).expect("image");
                        entry.fresh.push(job.variant_id);
                        entry.live.insert(job.variant_id);
                        Ok(())
                    } else {
                        // the base was replaced while this ran
                        g.expire(&job.name, job.variant_id, record)
                    }
                })
            }
            Err(reason) => {
                entry.variants.remove(&job.variant_id);
                entry.stats.generation_failures += 1;
                entry.stats.last_failure = Some(reason);
                Ok(())
            }
        };
        if let Err(e) = outcome.and_then(|()| g.persist(&job.name)) {
            let entry = g.images.get_mut(&job.name).expect("image");
            entry.stats.generation_failures += 1;
            entry.stats.last_failure = Some(e.to_string());
        }
        drop(g);
        self.changed.notify_all();
    }

    fn kick(self: &Arc<Self>, name: &str) {
        if self.options.replenish != Replenish::Background {
            return;
        }
        let jobs = self.inner.lock().plan(name, self.clock.now());
        for job in jobs {
            let this = Arc::clone(self);
            std::thread::spawn(move || {
                let name = job.name.clone();
                this.run_job(job);
                this.kick(&name);
            });
        }
    }

    /// Generates on the calling thread until the pool is full or a round
    /// of generation yields nothing; returns the number of new variants.
    pub fn replenish_now(&self, name: &str) -> Result<usize, RegistryError> {
        let mut made = 0;
        loop {
            let jobs = {
                let mut g = self.inner.lock();
                if !g.images.contains_key(name) {
                    return Err(RegistryError::UnknownImage(name.to_string()));
                }
                g.plan(name, self.clock.now())
            };
            if jobs.is_empty() {
                return Ok(made);
            }
            let before = self.fresh_count(name)?;
            std::thread::scope(|s| {
                for job in jobs {
                    s.spawn(|| self.run_job(job));
                }
            });
            let gained = self.fresh_count(name)?.saturating_sub(before);
            if gained == 0 {
                return Ok(made);
            }
            made += gained;
        }
    }

    /// Ids of the fresh variants, ascending.
    pub fn fresh_ids(&self, name: &str) -> Result<Vec<u64>, RegistryError> {
        let g = self.inner.lock();
        let e = g.images.get(name).ok_or_else(|| RegistryError::UnknownImage(name.to_string()))?;
        let mut ids = e.fresh.clone();
        ids.sort();
        Ok(ids)
    }

    pub fn fresh_count(&self, name: &str) -> Result<usize, RegistryError> {
        let g = self.inner.lock();
        g.images.get(name).map(|e| e.fresh.len()).ok_or_else(|| RegistryError::UnknownImage(name.to_string()))
    }

    /// Blocks until `name` has at least `n` fresh variants, or the timeout
    /// passes. Returns whether the count was reached.
    pub fn wait_for_fresh(&self, name: &str, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        loop {
            if g.images.get(name).is_some_and(|e| e.fresh.len() >= n) {
                return true;
            }
            if self.changed.wait_until(&mut g, deadline).timed_out() {
                return g.images.get(name).is_some_and(|e| e.fresh.len() >= n);
            }
        }
    }

    pub fn variant(&self, name: &str, id: u64) -> Option<Variant> {
        self.inner.lock().images.get(name).and_then(|e| e.variants.get(&id)).cloned()
    }

    pub fn variants(&self, name: &str) -> Result<Vec<Variant>, RegistryError> {
        let g = self.inner.lock();
        let e = g.images.get(name).ok_or_else(|| RegistryError::UnknownImage(name.to_string()))?;
        Ok(e.variants.values().cloned().collect())
    }

    pub fn policy(&self, name: &str) -> Result<PoolPolicy, RegistryError> {
        let g = self.inner.lock();
        g.images.get(name).map(|e| e.policy.clone()).ok_or_else(|| RegistryError::UnknownImage(name.to_string()))
    }

    /// Every transition so far, when recording is enabled.
    pub fn transitions(&self) -> Vec<Transition> {
        self.inner.lock().transitions.clone()
    }

    pub fn metrics(&self, name: &str) -> Result<ImageMetrics, RegistryError> {
        let g = self.inner.lock();
        let e = g.images.get(name).ok_or_else(|| RegistryError::UnknownImage(name.to_string()))?;
        Ok(self.image_metrics(&g, e))
    }

    pub fn metrics_all(&self) -> RegistryMetrics {
        let g = self.inner.lock();
        let images: Vec<ImageMetrics> = g.images.values().map(|e| self.image_metrics(&g, e)).collect();
        let durations = g.images.values().flat_map(|e| e.stats.durations_ms.iter().copied()).collect();
        RegistryMetrics::aggregate(images, duration_stats(durations))
    }

    fn image_metrics(&self, g: &Inner, e: &ImageEntry) -> ImageMetrics {
        let mut by_state: BTreeMap<VariantState, u64> = VariantState::ALL.iter().map(|&s| (s, 0)).collect();
        let mut counts: BTreeMap<VariantState, usize> = VariantState::ALL.iter().map(|&s| (s, 0)).collect();
        for v in e.variants.values() {
            *counts.get_mut(&v.state).expect("all states") += 1;
            if v.state.servable() {
                *by_state.get_mut(&v.state).expect("all states") += v.size_bytes;
            }
        }
        let elapsed_s = self.clock.now().saturating_sub(e.stats.since) as f64 / 1e3;
        ImageMetrics {
            name: e.name.clone(),
            storage_bytes: by_state.values().sum(),
            storage_bytes_by_state: by_state,
            blob_bytes: g.store.blob_bytes(&e.name),
            blob_count: g.store.blob_count(&e.name),
            variant_counts: counts,
            generation: duration_stats(e.stats.durations_ms.clone()),
            generated: e.stats.generated,
            generation_failures: e.stats.generation_failures,
            last_failure: e.stats.last_failure.clone(),
            replacement_rate: if elapsed_s > 0.0 { e.stats.generated as f64 / elapsed_s } else { 0.0 },
            uniqueness_ratio: if e.stats.acquire_count == 0 {
                1.0
            } else {
                e.stats.unique_count as f64 / e.stats.acquire_count as f64
            },
            acquire_count: e.stats.acquire_count,
            unique_count: e.stats.unique_count,
            rejected_count: e.stats.rejected_count,
            empty_pool_events: e.stats.empty_pool_events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::PipelineGenerator;
    use crate::policy::Limit;
    use helix_core::isa::assemble;

    const SRC: &str = "
        in r0
        movi r1, 0
        beq r0, r1, zero
        push r0
        call double
        pop r1
        out r0
        halt
    zero:
        movi r2, 5
        out r2
        halt
    double:
        enter 1
        load r3, sp, 2
        add r0, r3, r3
        store r0, sp, 0
        leave 1
        ret
    ";

    fn manual(seed: u64) -> (Arc<Registry>, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000));
        let opts = RegistryOptions { replenish: Replenish::Manual, rng_seed: Some(seed), record_transitions: true };
        (Registry::new(Arc::new(PipelineGenerator), clock.clone(), opts), clock)
    }

    fn policy(size: u32, max: Limit, on_empty: OnEmpty) -> PoolPolicy {
        PoolPolicy { target_pool_size: size, max_deploys_per_variant: max, on_empty, ..PoolPolicy::default() }
    }

    fn put(r: &Arc<Registry>, p: PoolPolicy) {
        let spec = PipelineSpec::new(0, &["bilr", "stack_pad"]);
        r.put_image("app", assemble(SRC).unwrap(), spec, p).unwrap();
    }

    #[test]
    fn put_fills_the_pool() {
        let (r, _) = manual(1);
        put(&r, policy(4, Limit::Unlimited, OnEmpty::Reject));
        assert_eq!(r.fresh_count("app").unwrap(), 0);
        assert_eq!(r.replenish_now("app").unwrap(), 4);
        assert_eq!(r.fresh_count("app").unwrap(), 4);
        let m = r.metrics("app").unwrap();
        assert_eq!(m.acquire_count, 0);
        assert_eq!(m.uniqueness_ratio, 1.0);
        assert!(m.generation.p50_ms <= m.generation.p95_ms && m.generation.p95_ms <= m.generation.p99_ms);
        let seeds: HashSet<u64> = r.variants("app").unwrap().iter().map(|v| v.master_seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn bad_puts_are_rejected() {
        let (r, _) = manual(1);
        let img = assemble(SRC).unwrap();
        let spec = PipelineSpec::new(0, &["bilr"]);
        let err = r.put_image("app", img.clone(), spec.clone(), policy(0, Limit::Unlimited, OnEmpty::Reject));
        assert!(matches!(err, Err(RegistryError::InvalidPolicy(_))));
        let err = r.put_image("../x", img.clone(), spec, PoolPolicy::default());
        assert!(matches!(err, Err(RegistryError::InvalidName(_))));
        let err = r.put_image("app", img, PipelineSpec::new(0, &["nope"]), PoolPolicy::default());
        assert!(matches!(err, Err(RegistryError::InvalidPipeline(_))));
        assert!(matches!(r.acquire("app"), Err(RegistryError::UnknownImage(_))));
    }

    #[test]
    fn single_use_pool_rejects_second_acquire() {
        let (r, _) = manual(2);
        put(&r, policy(1, Limit::Count(1), OnEmpty::Reject));
        r.replenish_now("app").unwrap();
        let first = r.acquire("app").unwrap();
        assert_eq!(first.variant.state, VariantState::Deployed);
        assert!(first.unique);
        assert_eq!(r.variant("app", first.variant.variant_id).unwrap().state, VariantState::Expired);
        assert!(matches!(r.acquire("app"), Err(RegistryError::PoolExhausted(_))));
        let m = r.metrics("app").unwrap();
        assert_eq!((m.acquire_count, m.rejected_count, m.empty_pool_events), (1, 1, 1));
        assert_eq!(m.storage_bytes, 0);
        assert_eq!(m.blob_count, 0);
    }

    #[test]
    fn reuse_serves_least_deployed() {
        let (r, _) = manual(3);
        put(&r, policy(2, Limit::Unlimited, OnEmpty::ReuseLeastDeployed));
        r.replenish_now("app").unwrap();
        let a = r.acquire("app").unwrap().variant.variant_id;
        let b = r.acquire("app").unwrap().variant.variant_id;
        let c = r.acquire("app").unwrap();
        let d = r.acquire("app").unwrap();
        assert!(!c.unique && !d.unique);
        let mut got = [c.variant.variant_id, d.variant.variant_id];
        got.sort();
        let mut want = [a, b];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(r.metrics("app").unwrap().uniqueness_ratio, 0.5);
    }

    #[test]
    fn ttl_sweep() {
        let (r, clock) = manual(4);
        let mut p = policy(3, Limit::Unlimited, OnEmpty::Reject);
        p.variant_ttl = Some(Duration::from_secs(10));
        put(&r, p);
        r.replenish_now("app").unwrap();
        let before = r.metrics("app").unwrap().storage_bytes;
        assert!(before > 0);
        assert_eq!(r.expire_sweep(clock.now() + 9_999).unwrap(), 0);
        assert_eq!(r.expire_sweep(clock.now() + 10_000).unwrap(), 3);
        assert_eq!(r.expire_sweep(clock.now() + 10_000).unwrap(), 0);
        assert_eq!(r.metrics("app").unwrap().storage_bytes, 0);
        assert_eq!(r.fresh_count("app").unwrap(), 0);
    }

    #[test]
    fn no_ttl_never_sweeps() {
        let (r, _) = manual(5);
        put(&r, policy(2, Limit::Unlimited, OnEmpty::Reject));
        r.replenish_now("app").unwrap();
        assert_eq!(r.expire_sweep(u64::MAX).unwrap(), 0);
    }

    #[test]
    fn reput_expires_and_resets() {
        let (r, _) = manual(6);
        put(&r, policy(2, Limit::Unlimited, OnEmpty::ReuseLeastDeployed));
        r.replenish_now("app").unwrap();
        r.acquire("app").unwrap();
        let receipt = r
            .put_image("app", assemble(SRC).unwrap(), PipelineSpec::new(0, &["bilr"]), PoolPolicy::default())
            .unwrap();
        assert!(receipt.replaced);
        assert_eq!(receipt.expired, 2);
        let m = r.metrics("app").unwrap();
        assert_eq!(m.acquire_count, 0);
        assert_eq!(m.storage_bytes, 0);
        assert!(r.variants("app").unwrap().iter().all(|v| v.state == VariantState::Expired));
    }

    #[test]
    fn storage_matches_blobs_and_transitions_follow_the_edges() {
        let (r, _) = manual(7);
        put(&r, policy(3, Limit::Count(2), OnEmpty::ReuseLeastDeployed));
        for _ in 0..20 {
            r.replenish_now("app").unwrap();
            r.acquire("app").unwrap();
            let m = r.metrics("app").unwrap();
            let live: u64 = r.variants("app").unwrap().iter().filter(|v| v.state.servable()).map(|v| v.size_bytes).sum();
            assert_eq!(m.storage_bytes, live);
            assert!(m.blob_bytes <= m.storage_bytes);
        }
        let log = r.transitions();
        assert!(!log.is_empty());
        assert!(log.iter().all(|t| t.from.can_become(t.to)));
    }

    #[test]
    fn background_replenishment_reaches_target() {
        let opts = RegistryOptions { rng_seed: Some(8), ..RegistryOptions::default() };
        let r = Registry::new(Arc::new(PipelineGenerator), Arc::new(SystemClock), opts);
        put(&r, policy(4, Limit::Count(1), OnEmpty::Reject));
        assert!(r.wait_for_fresh("app", 4, Duration::from_secs(10)));
        r.acquire("app").unwrap();
        assert!(r.wait_for_fresh("app", 4, Duration::from_secs(10)));
    }

    #[test]
    fn recovery_replays_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(5));
        let opts = RegistryOptions { replenish: Replenish::Manual, rng_seed: Some(9), record_transitions: false };
        let served = {
            let r = Registry::open(dir.path(), Arc::new(PipelineGenerator), clock.clone(), opts.clone()).unwrap();
            put(&r, policy(3, Limit::Unlimited, OnEmpty::Reject));
            r.replenish_now("app").unwrap();
            r.acquire("app").unwrap()
        };
        let r = Registry::open(dir.path(), Arc::new(PipelineGenerator), clock, opts).unwrap();
        assert_eq!(r.fresh_count("app").unwrap(), 2);
        let m = r.metrics("app").unwrap();
        assert_eq!(m.acquire_count, 1);
        assert_eq!(m.blob_count as u64, m.variant_counts.values().sum::<usize>() as u64);
        let v = r.variant("app", served.variant.variant_id).unwrap();
        assert_eq!(v.state, VariantState::Deployed);
        let next = r.acquire("app").unwrap();
        assert_ne!(next.variant.variant_id, served.variant.variant_id);
        assert_eq!(
            ProgramImage::from_bytes(&next.image).unwrap().digest_hex(),
            next.variant.digest.clone().unwrap()
        );
    }

    #[test]
    fn percentiles_are_nearest_rank() {
        let s = duration_stats((1..=100).map(f64::from).collect());
        assert_eq!((s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms), (50.0, 95.0, 99.0, 100.0));
        assert_eq!(duration_stats(Vec::new()).p99_ms, 0.0);
    }
}
