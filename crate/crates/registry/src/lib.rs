//! Stores base images, keeps a pool of diversified variants for each, and
//! serves a random fresh variant per request. Variants move through
//! `generating -> fresh -> deployed -> expired` and expire by deploy count
//! or age.

pub mod client;
pub mod generator;
pub mod http;
pub mod metrics;
pub mod policy;
pub mod registry;
pub mod store;
pub mod variant;

pub use generator::{DelayedGenerator, Generator, PipelineGenerator};
pub use metrics::{DurationStats, ImageMetrics, RegistryMetrics};
pub use policy::{Limit, OnEmpty, PolicyError, PoolPolicy};
pub use registry::{
    Acquired, Clock, ManualClock, PutReceipt, Registry, RegistryError, RegistryOptions, Replenish, SystemClock,
};
pub use variant::{Millis, Transition, Variant, VariantState};
