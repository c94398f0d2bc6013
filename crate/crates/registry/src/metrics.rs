use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::variant::VariantState;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Snapshot for one image. `storage_bytes` counts every servable variant's
/// size; `blob_bytes` is what the store actually holds after identical
/// variants share a blob. `uniqueness_ratio` is 1.0 before any acquire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub storage_bytes: u64,
    pub storage_bytes_by_state: BTreeMap<VariantState, u64>,
    pub blob_bytes: u64,
    pub blob_count: usize,
    pub variant_counts: BTreeMap<VariantState, usize>,
    pub generation: DurationStats,
    pub generated: u64,
    pub generation_failures: u64,
    pub last_failure: Option<String>,
    /// Variants generated per second since the image was put.
    pub replacement_rate: f64,
    pub uniqueness_ratio: f64,
    pub acquire_count: u64,
    pub unique_count: u64,
    pub rejected_count: u64,
    pub empty_pool_events: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryMetrics {
    pub total: ImageMetrics,
    pub images: Vec<ImageMetrics>,
}

impl RegistryMetrics {
    pub(crate) fn aggregate(images: Vec<ImageMetrics>, generation: DurationStats) -> RegistryMetrics {
        let mut total = ImageMetrics {
            name: "*".to_string(),
            storage_bytes: 0,
            storage_bytes_by_state: VariantState::ALL.iter().map(|&s| (s, 0)).collect(),
            blob_bytes: 0,
            blob_count: 0,
            variant_counts: VariantState::ALL.iter().map(|&s| (s, 0)).collect(),
            generation,
            generated: 0,
            generation_failures: 0,
            last_failure: None,
            replacement_rate: 0.0,
            uniqueness_ratio: 1.0,
            acquire_count: 0,
            unique_count: 0,
            rejected_count: 0,
            empty_pool_events: 0,
        };
        for m in &images {
            total.storage_bytes += m.storage_bytes;
            for (s, b) in &m.storage_bytes_by_state {
                *total.storage_bytes_by_state.entry(*s).or_default() += b;
            }
            for (s, c) in &m.variant_counts {
                *total.variant_counts.entry(*s).or_default() += c;
            }
            total.blob_bytes += m.blob_bytes;
            total.blob_count += m.blob_count;
            total.generated += m.generated;
            total.generation_failures += m.generation_failures;
            total.replacement_rate += m.replacement_rate;
            total.acquire_count += m.acquire_count;
            total.unique_count += m.unique_count;
            total.rejected_count += m.rejected_count;
            total.empty_pool_events += m.empty_pool_events;
        }
        if total.acquire_count > 0 {
            total.uniqueness_ratio = total.unique_count as f64 / total.acquire_count as f64;
        }
        RegistryMetrics { total, images }
    }
}
