use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{derive_seed, plugin, Plugin, PluginConfig, TransformError};
use crate::ir::{validate, Analysis, ProgramIR, ValidationReport};

/// The five reference pipelines, by short name.
pub const CANONICAL_PIPELINES: [(&str, &[&str]); 5] = [
    ("P1", &["bilr", "stack_pad", "global_shuffle", "heap_pad"]),
    ("P2", &["canary", "cfi_check"]),
    ("P3", &["stack_pad", "global_shuffle"]),
    ("P4", &["indirect_to_direct", "cfi_check"]),
    ("P5", &["canary", "indirect_to_direct", "heap_pad", "stack_pad", "global_shuffle", "bilr"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub plugin: String,
    #[serde(default)]
    pub config: PluginConfig,
}

impl StageSpec {
    pub fn new(plugin: &str) -> StageSpec {
        StageSpec { plugin: plugin.to_string(), config: PluginConfig::new() }
    }
}

/// `{"master_seed": …, "stages": [{"plugin": …, "config": {…}}]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub master_seed: u64,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn new(master_seed: u64, plugins: &[&str]) -> PipelineSpec {
        PipelineSpec { master_seed, stages: plugins.iter().map(|p| StageSpec::new(p)).collect() }
    }

    pub fn with_seed(&self, master_seed: u64) -> PipelineSpec {
        PipelineSpec { master_seed, stages: self.stages.clone() }
    }

    /// Checks that every stage names a known plugin.
    pub fn resolve(&self) -> Result<Vec<&'static dyn Plugin>, ComposeError> {
        self.stages
            .iter()
            .enumerate()
            .map(|(index, s)| plugin(&s.plugin).ok_or_else(|| ComposeError::UnknownPlugin { index, name: s.plugin.clone() }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub plugin: String,
    pub seed: u64,
    pub work_items: usize,
    pub duration: Duration,
}

#[derive(Clone, Debug)]
pub struct ComposeOutcome {
    pub ir: ProgramIR,
    pub warnings: Vec<String>,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("stage {index}: unknown plugin {name:?}")]
    UnknownPlugin { index: usize, name: String },
    #[error("stage {index} ({plugin}): {source}")]
    Stage {
        index: usize,
        plugin: String,
        #[source]
        source: TransformError,
    },
    #[error("stage {index} ({plugin}) produced invalid IR: {report}")]
    InvalidOutput { index: usize, plugin: String, report: ValidationReport },
}

/// Runs the stages in order, each with its own derived seed. Before a stage
/// runs, any analysis it requires that is missing or stale is recomputed.
///
/// A stage that finds nothing to do although the original program gave it
/// work, after an earlier stage wrote one of the facets it reads, raises a
/// "consumed by earlier stage" warning. A stage that had nothing to do from
/// the start raises its own idle warning, if it has one.
pub fn compose(pipeline: &PipelineSpec, ir: ProgramIR) -> Result<ComposeOutcome, ComposeError> {
    let plugins = pipeline.resolve()?;
    let original_work: Vec<usize> = plugins.iter().map(|p| p.work_items(&ir)).collect();
    let mut current = ir;
    let mut warnings = Vec::new();
    let mut stages = Vec::with_capacity(plugins.len());

    for (index, (stage, plugin)) in pipeline.stages.iter().zip(&plugins).enumerate() {
        let stage_err = |source: TransformError| ComposeError::Stage { index, plugin: stage.plugin.clone(), source };
        let missing: Vec<Analysis> = plugin.requires().iter().copied().filter(|a| !current.is_valid(*a)).collect();
        if !missing.is_empty() {
            current = current.reanalyze(&missing).map_err(|e| stage_err(e.into()))?;
        }

        let work = plugin.work_items(&current);
        if work == 0 {
            let consumer = (original_work[index] > 0)
                .then(|| {
                    let reads: BTreeSet<_> = plugin.reads().iter().collect();
                    plugins[..index].iter().enumerate().find_map(|(j, earlier)| {
                        earlier.writes().iter().find(|f| reads.contains(f)).map(|f| (j, earlier.name(), *f))
                    })
                })
                .flatten();
            if let Some((j, earlier, facet)) = consumer {
                warnings.push(format!(
                    "stage {index} ({}): facet {facet} consumed by earlier stage {j} ({earlier})",
                    plugin.name()
                ));
            } else if let Some(idle) = plugin.idle_warning() {
                warnings.push(format!("stage {index} ({}): {idle}", plugin.name()));
            }
        }

        let seed = derive_seed(pipeline.master_seed, index as u64, &stage.plugin);
        let started = Instant::now();
        let next = plugin.apply(&current, seed, &stage.config).map_err(stage_err)?;
        let duration = started.elapsed();
        let report = validate(&next);
        if !report.is_clean() {
            return Err(ComposeError::InvalidOutput { index, plugin: stage.plugin.clone(), report });
        }
        stages.push(StageReport { index, plugin: stage.plugin.clone(), seed, work_items: work, duration });
        current = next;
    }
    Ok(ComposeOutcome { ir: current, warnings, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitter::{emit, EmitOptions};
    use crate::isa::assemble;
    use crate::lifter::lift;

    const JT: &str = "
        .jumptable T: a b
        .global G, 1, 3
        in r0
        movi r1, @T
        add r1, r1, r0
        load r2, r1, 0
        jmpi r2
    a:  call f
        halt
    b:  halt
    f:  enter 1
        movi r5, @G
        load r4, r5, 0
        store r4, sp, 0
        out r4
        leave 1
        ret
    ";

    fn ir() -> ProgramIR {
        lift(&assemble(JT).unwrap()).unwrap()
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let out = compose(&PipelineSpec::new(5, &[]), ir()).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(emit(&out.ir, &EmitOptions::default()).unwrap(), assemble(JT).unwrap());
    }

    #[test]
    fn disjoint_facets_compose_silently() {
        let out = compose(&PipelineSpec::new(5, &["stack_pad", "global_shuffle"]), ir()).unwrap();
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
    }

    #[test]
    fn cfi_after_indirect_to_direct_warns_once() {
        let out = compose(&PipelineSpec::new(5, &["indirect_to_direct", "cfi_check"]), ir()).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("facet indirect-branches consumed by earlier stage"), "{}", out.warnings[0]);
    }

    #[test]
    fn idle_cfi_warns() {
        let plain = lift(&assemble("in r0\nout r0\nhalt").unwrap()).unwrap();
        let out = compose(&PipelineSpec::new(0, &["cfi_check"]), plain).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(!out.warnings[0].contains("consumed"));
    }

    #[test]
    fn unknown_plugin_and_refusal_carry_the_stage_index() {
        let err = compose(&PipelineSpec::new(0, &["bilr", "nope"]), ir()).unwrap_err();
        assert!(matches!(err, ComposeError::UnknownPlugin { index: 1, .. }));
        let nested = lift(&assemble("enter 1\nenter 1\nleave 1\nleave 1\nhalt").unwrap()).unwrap();
        let err = compose(&PipelineSpec::new(0, &["bilr", "stack_pad"]), nested).unwrap_err();
        assert!(matches!(err, ComposeError::Stage { index: 1, .. }), "{err}");
    }

    #[test]
    fn deterministic_and_seeded_per_stage() {
        let spec = PipelineSpec::new(11, &["bilr", "stack_pad", "global_shuffle", "heap_pad"]);
        let a = emit(&compose(&spec, ir()).unwrap().ir, &EmitOptions::default()).unwrap();
        let b = emit(&compose(&spec, ir()).unwrap().ir, &EmitOptions::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let out = compose(&spec, ir()).unwrap();
        assert_eq!(out.stages[1].seed, derive_seed(11, 1, "stack_pad"));
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{"master_seed": 3, "stages": [{"plugin": "stack_pad", "config": {"max_pad_words": 4}}, {"plugin": "bilr"}]}"#;
        let spec: PipelineSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.stages.len(), 2);
        assert_eq!(spec.stages[0].config["max_pad_words"], 4);
        let back: PipelineSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
