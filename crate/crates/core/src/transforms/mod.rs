//! Transform plugins and their composition.
//!
//! A plugin is a pure function of `(IR, seed, config)`. It declares which
//! facets of the IR it reads and writes; [`compose`] uses those declarations
//! to tell when an earlier stage has left a later one with nothing to do.

mod bilr;
mod canary;
mod cfi;
mod frames;
mod global_shuffle;
mod heap_pad;
mod indirect;
mod pipeline;
mod scratch;
mod stack_pad;

pub use bilr::Bilr;
pub use canary::Canary;
pub use cfi::CfiCheck;
pub use frames::{analyze_frames, Frame, FrameAccess, FrameError, FrameMap};
pub use global_shuffle::GlobalShuffle;
pub use heap_pad::HeapPad;
pub use indirect::IndirectToDirect;
pub use pipeline::{compose, ComposeError, ComposeOutcome, PipelineSpec, StageReport, StageSpec, CANONICAL_PIPELINES};
pub use stack_pad::StackPad;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::{Analysis, IrError, ProgramIR};

/// Per-stage configuration: a JSON object of plugin-specific keys.
pub type PluginConfig = serde_json::Map<String, serde_json::Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Facet {
    CodeLayout,
    StackFrames,
    GlobalLayout,
    HeapSizes,
    IndirectBranches,
    InstructionStream,
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Facet::CodeLayout => "code-layout",
            Facet::StackFrames => "stack-frames",
            Facet::GlobalLayout => "global-layout",
            Facet::HeapSizes => "heap-sizes",
            Facet::IndirectBranches => "indirect-branches",
            Facet::InstructionStream => "instruction-stream",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("{plugin} refused: {reason}")]
    Refused { plugin: &'static str, reason: String },
    #[error("{plugin}: bad config key {key}: {reason}")]
    BadConfig { plugin: &'static str, key: String, reason: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

pub trait Plugin: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> &'static str {
        "1.0.0"
    }
    fn reads(&self) -> &'static [Facet];
    fn writes(&self) -> &'static [Facet];
    /// Analyses that must be valid before `apply` runs.
    fn requires(&self) -> &'static [Analysis] {
        &[]
    }
    /// Number of sites the plugin would act on.
    fn work_items(&self, ir: &ProgramIR) -> usize;
    /// Warning to raise when the plugin has nothing to act on at all.
    fn idle_warning(&self) -> Option<&'static str> {
        None
    }
    fn apply(&self, ir: &ProgramIR, seed: u64, config: &PluginConfig) -> Result<ProgramIR, TransformError>;
}

static CATALOG: [&dyn Plugin; 7] = [
    &Bilr,
    &StackPad,
    &GlobalShuffle,
    &HeapPad,
    &Canary,
    &IndirectToDirect,
    &CfiCheck,
];

/// Every available plugin.
pub fn catalog() -> &'static [&'static dyn Plugin] {
    &CATALOG
}

pub fn plugin(name: &str) -> Option<&'static dyn Plugin> {
    CATALOG.iter().copied().find(|p| p.name() == name)
}

/// Seed for one pipeline stage: the first eight bytes, little-endian, of
/// SHA-256 over `master ‖ stage_index ‖ plugin_name` (integers as 8-byte
/// little-endian).
pub fn derive_seed(master_seed: u64, stage_index: u64, plugin_name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(stage_index.to_le_bytes());
    h.update(plugin_name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub(crate) fn config_u64(
    plugin: &'static str,
    config: &PluginConfig,
    key: &str,
    default: u64,
) -> Result<u64, TransformError> {
    let bad = |reason: &str| TransformError::BadConfig { plugin, key: key.to_string(), reason: reason.to_string() };
    match config.get(key) {
        None => Ok(default),
        Some(v) => match v.as_u64() {
            Some(0) => Err(bad("must be at least 1")),
            Some(n) => Ok(n),
            None => Err(bad("expected a positive integer")),
        },
    }
}

pub(crate) fn refuse(plugin: &'static str, reason: impl Into<String>) -> TransformError {
    TransformError::Refused { plugin, reason: reason.into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_matches_hashlib() {
        // python3: int.from_bytes(sha256(bytes(16)).digest()[:8], "little")
        assert_eq!(derive_seed(0, 0, ""), 0xd59d_71f7_ff08_4737);
        assert_eq!(derive_seed(0, 0, "bilr"), 0x821b_91b9_e714_a189);
        assert_eq!(derive_seed(0, 1, "bilr"), 0x8b82_e176_0d58_46fc);
    }

    #[test]
    fn catalog_names_are_unique_and_resolvable() {
        let names: std::collections::BTreeSet<_> = catalog().iter().map(|p| p.name()).collect();
        assert_eq!(names.len(), 7);
        for n in names {
            assert_eq!(plugin(n).unwrap().name(), n);
        }
        assert!(plugin("nope").is_none());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PluginConfig::new();
        assert_eq!(config_u64("x", &cfg, "k", 5).unwrap(), 5);
        cfg.insert("k".into(), serde_json::json!(0));
        assert!(config_u64("x", &cfg, "k", 5).is_err());
        cfg.insert("k".into(), serde_json::json!("a"));
        assert!(config_u64("x", &cfg, "k", 5).is_err());
    }
}
