use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use helix_registry::{OnEmpty, PoolPolicy};

use crate::config::{load_trace, Arrival, GenerationTime, SimConfig, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Generated,
    ServeFresh,
    ServeReuse,
    Reject,
    Expire,
}

impl EventKind {
    fn name(self) -> &'static str {
        match self {
            EventKind::Generated => "generated",
            EventKind::ServeFresh => "serve_fresh",
            EventKind::ServeReuse => "serve_reuse",
            EventKind::Reject => "reject",
            EventKind::Expire => "expire",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub time: f64,
    pub event: EventKind,
    pub variant_id: Option<u64>,
    pub pool_fresh_count: usize,
}

/// Writes the event log as CSV: `time,event,variant_id,pool_fresh_count`.
pub fn write_event_csv(events: &[LoggedEvent], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "time,event,variant_id,pool_fresh_count")?;
    for e in events {
        let id = e.variant_id.map(|i| i.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", e.time, e.event.name(), id, e.pool_fresh_count)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub requests: u64,
    pub served: u64,
    pub rejected: u64,
    pub unique: u64,
    /// Unique serves over all serves; 1.0 when nothing was served.
    pub uniqueness_ratio: f64,
    pub repeat_serve_probability: f64,
    /// Requests that found no fresh variant, over all requests.
    pub pool_empty_fraction: f64,
    pub empty_pool_events: u64,
    pub generated: u64,
    /// Variants generated per second of horizon.
    pub replacement_rate: f64,
    /// Time-weighted over the horizon.
    pub mean_storage_bytes: f64,
    pub max_storage_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<LoggedEvent>>,
}

// Generation completions sort before arrivals at equal times.
const GENERATED: u8 = 0;
const ARRIVAL: u8 = 1;

#[derive(Clone, Copy, Debug)]
struct Queued {
    time: f64,
    kind: u8,
    seq: u64,
    variant: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.kind.cmp(&self.kind)).then(other.seq.cmp(&self.seq))
    }
}

struct Live {
    created_at: f64,
    deploys: u32,
}

enum GenDist {
    Fixed(f64),
    Lognormal(LogNormal<f64>),
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    policy: &'a PoolPolicy,
    queue: BinaryHeap<Queued>,
    seq: u64,
    next_id: u64,
    fresh: Vec<u64>,
    live: HashMap<u64, Live>,
    /// Deployed live variants as (deploys, id).
    deployed: BTreeSet<(u32, u64)>,
    in_flight: u32,
    gen: GenDist,
    gen_rng: ChaCha8Rng,
    pick_rng: ChaCha8Rng,
    last_t: f64,
    storage_area: f64,
    max_live: usize,
    r: SimResult,
    log: Vec<LoggedEvent>,
}

impl Engine<'_> {
    fn push(&mut self, time: f64, kind: u8, variant: u64) {
        self.seq += 1;
        self.queue.push(Queued { time, kind, seq: self.seq, variant });
    }

    fn note(&mut self, time: f64, event: EventKind, variant_id: Option<u64>) {
        if self.cfg.record_events {
            self.log.push(LoggedEvent { time, event, variant_id, pool_fresh_count: self.fresh.len() });
        }
    }

    fn advance(&mut self, t: f64) {
        let t = t.min(self.cfg.horizon);
        if t > self.last_t {
            self.storage_area += self.live.len() as f64 * (t - self.last_t);
            self.last_t = t;
        }
    }

    fn new_variant(&mut self, created_at: f64) -> u64 {
        self.next_id += 1;
        self.live.insert(self.next_id, Live { created_at, deploys: 0 });
        self.max_live = self.max_live.max(self.live.len());
        self.next_id
    }

    fn expire(&mut self, t: f64, id: u64) {
        if let Some(v) = self.live.remove(&id) {
            self.deployed.remove(&(v.deploys, id));
            self.fresh.retain(|&f| f != id);
            self.note(t, EventKind::Expire, Some(id));
        }
    }

    fn plan(&mut self, t: f64) {
        while (self.fresh.len() as u32 + self.in_flight) < self.policy.target_pool_size
            && self.in_flight < self.policy.generator_parallelism
        {
            self.in_flight += 1;
            let d = match &self.gen {
                GenDist::Fixed(s) => *s,
                GenDist::Lognormal(ln) => ln.sample(&mut self.gen_rng),
            };
            // ids are handed out on completion, so the id order follows
            // the order variants become fresh
            self.push(t + d, GENERATED, 0);
        }
    }

    fn generated(&mut self, t: f64) {
        self.in_flight -= 1;
        let id = self.new_variant(t);
        self.fresh.push(id);
        self.r.generated += 1;
        self.note(t, EventKind::Generated, Some(id));
        self.plan(t);
    }

    fn sweep(&mut self, t: f64) {
        let Some(ttl) = self.policy.variant_ttl else { return };
        let ttl = ttl.as_secs_f64();
        let mut stale: Vec<u64> =
            self.live.iter().filter(|(_, v)| t - v.created_at >= ttl).map(|(&id, _)| id).collect();
        stale.sort();
        for id in stale {
            self.expire(t, id);
        }
    }

    fn arrival(&mut self, t: f64) {
        self.r.requests += 1;
        self.sweep(t);
        let chosen = if self.fresh.is_empty() {
            self.r.empty_pool_events += 1;
            match self.policy.on_empty {
                OnEmpty::Reject => None,
                OnEmpty::ReuseLeastDeployed => self.deployed.first().map(|&(_, id)| id),
            }
        } else {
            let k = self.pick_rng.random_range(0..self.fresh.len());
            Some(self.fresh.swap_remove(k))
        };
        match chosen {
            None => {
                self.r.rejected += 1;
                self.note(t, EventKind::Reject, None);
            }
            Some(id) => {
                let v = self.live.get_mut(&id).expect("chosen variant is live");
                let before = v.deploys;
                v.deploys += 1;
                let deploys = v.deploys;
                self.deployed.remove(&(before, id));
                self.deployed.insert((deploys, id));
                self.r.served += 1;
                let kind = if before == 0 {
                    self.r.unique += 1;
                    EventKind::ServeFresh
                } else {
                    EventKind::ServeReuse
                };
                self.note(t, kind, Some(id));
                if self.policy.max_deploys_per_variant.reached(deploys) {
                    self.expire(t, id);
                }
            }
        }
        self.plan(t);
    }
}

/// Runs the configured simulation, reading the trace file if there is one.
pub fn simulate(cfg: &SimConfig) -> Result<SimResult, SimError> {
    let times = match &cfg.arrival {
        Arrival::Trace { file } => Some(load_trace(file)?),
        Arrival::Poisson { .. } => None,
    };
    run(cfg, times.as_deref())
}

/// Runs with explicit arrival times in place of the configured arrivals.
pub fn simulate_with_arrivals(cfg: &SimConfig, times: &[f64]) -> Result<SimResult, SimError> {
    run(cfg, Some(times))
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn run(cfg: &SimConfig, times: Option<&[f64]>) -> Result<SimResult, SimError> {
    cfg.validate()?;
    let gen = match cfg.generation_time {
        GenerationTime::Fixed { seconds } => GenDist::Fixed(seconds),
        GenerationTime::Lognormal { mu, sigma } => {
            GenDist::Lognormal(LogNormal::new(mu, sigma).map_err(|e| SimError::Config(e.to_string()))?)
        }
    };
    let mut e = Engine {
        cfg,
        policy: &cfg.policy,
        queue: BinaryHeap::new(),
        seq: 0,
        next_id: 0,
        fresh: Vec::new(),
        live: HashMap::new(),
        deployed: BTreeSet::new(),
        in_flight: 0,
        gen,
        gen_rng: stream(cfg.rng_seed, 1),
        pick_rng: stream(cfg.rng_seed, 2),
        last_t: 0.0,
        storage_area: 0.0,
        max_live: 0,
        r: SimResult {
            requests: 0,
            served: 0,
            rejected: 0,
            unique: 0,
            uniqueness_ratio: 1.0,
            repeat_serve_probability: 0.0,
            pool_empty_fraction: 0.0,
            empty_pool_events: 0,
            generated: 0,
            replacement_rate: 0.0,
            mean_storage_bytes: 0.0,
            max_storage_bytes: 0,
            events: None,
        },
        log: Vec::new(),
    };

    if cfg.warmup {
        for _ in 0..cfg.policy.target_pool_size {
            let id = e.new_variant(0.0);
            e.fresh.push(id);
        }
    }
    e.plan(0.0);

    let mut arrivals_rng = stream(cfg.rng_seed, 0);
    let poisson = match cfg.arrival {
        Arrival::Poisson { rate } if times.is_none() => {
            Some(Exp::new(rate).map_err(|err| SimError::Config(err.to_string()))?)
        }
        _ => None,
    };
    match (times, &poisson) {
        (Some(ts), _) => {
            for &t in ts.iter().filter(|&&t| t <= cfg.horizon) {
                e.push(t, ARRIVAL, 0);
            }
        }
        (None, Some(exp)) => {
            let t = exp.sample(&mut arrivals_rng);
            if t <= cfg.horizon {
                e.push(t, ARRIVAL, 0);
            }
        }
        (None, None) => unreachable!("trace arrivals always come with times"),
    }

    while let Some(ev) = e.queue.pop() {
        if ev.time > cfg.horizon {
            break;
        }
        e.advance(ev.time);
        match ev.kind {
            GENERATED => e.generated(ev.time),
            _ => {
                e.arrival(ev.time);
                if let Some(exp) = &poisson {
                    let next = ev.time + exp.sample(&mut arrivals_rng);
                    if next <= cfg.horizon {
                        e.push(next, ARRIVAL, ev.variant);
                    }
                }
            }
        }
    }
    e.advance(cfg.horizon);

    let mut r = e.r;
    if r.served > 0 {
        r.uniqueness_ratio = r.unique as f64 / r.served as f64;
    }
    r.repeat_serve_probability = 1.0 - r.uniqueness_ratio;
    if r.requests > 0 {
        r.pool_empty_fraction = r.empty_pool_events as f64 / r.requests as f64;
    }
    r.replacement_rate = r.generated as f64 / cfg.horizon;
    r.mean_storage_bytes = e.storage_area / cfg.horizon * cfg.variant_size_bytes as f64;
    r.max_storage_bytes = e.max_live as u64 * cfg.variant_size_bytes;
    if cfg.record_events {
        r.events = Some(e.log);
    }
    Ok(r)
}
