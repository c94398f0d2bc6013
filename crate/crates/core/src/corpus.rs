//! Test programs with their input domains.
//!
//! A corpus file is assembly source whose leading comment lines may carry
//! headers:
//!
//! ```text
//! ; inputs: 3 0..9          three words, each in 0..=9
//! ; hardened-by: canary     plugins expected to stop the attack
//! ; attack: 3 10 20 99      an input that misbehaves unless hardened
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::emitter::{emit, EmitError, EmitOptions};
use crate::isa::{assemble, execute, AsmError, ExecutionResult, ProgramImage, Termination, DEFAULT_STEP_LIMIT};
use crate::lifter::{compare_on_inputs, lift, LiftError, RoundtripReport};
use crate::rng::Xoshiro256StarStar;
use crate::transforms::{compose, ComposeError, PipelineSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InputDomain {
    pub len: usize,
    pub lo: i64,
    pub hi: i64,
}

impl InputDomain {
    /// `count` input vectors drawn uniformly from the domain.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<i64>> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let span = (self.hi as i128 - self.lo as i128 + 1) as u64;
        (0..count)
            .map(|_| {
                (0..self.len)
                    .map(|_| {
                        // span 0 means the whole i64 range
                        let off = if span == 0 { rng.next_u64() } else { rng.below(span) };
                        self.lo.wrapping_add(off as i64)
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Header {
    pub inputs: InputDomain,
    pub hardened_by: Vec<String>,
    pub attack: Option<Vec<i64>>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: bad header line {line:?}")]
    BadHeader { file: String, line: String },
    #[error("{file}: {source}")]
    Asm {
        file: String,
        #[source]
        source: AsmError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_domain(text: &str) -> Option<InputDomain> {
    let (len, range) = text.split_once(char::is_whitespace)?;
    let (lo, hi) = range.trim().split_once("..")?;
    let d = InputDomain { len: len.parse().ok()?, lo: lo.parse().ok()?, hi: hi.parse().ok()? };
    (d.lo <= d.hi).then_some(d)
}

fn parse_words(text: &str) -> Option<Vec<i64>> {
    text.split_whitespace().map(|w| w.parse().ok()).collect()
}

/// Reads the headers from the comment lines of `source`.
pub fn parse_header(file: &str, source: &str) -> Result<Header, CorpusError> {
    let mut header = Header::default();
    for line in source.lines() {
        let Some(comment) = line.trim().strip_prefix(';') else { continue };
        let Some((key, value)) = comment.split_once(':') else { continue };
        let value = value.trim();
        let bad = || CorpusError::BadHeader { file: file.to_string(), line: line.to_string() };
        match key.trim() {
            "inputs" => header.inputs = parse_domain(value).ok_or_else(bad)?,
            "hardened-by" => header.hardened_by = value.split_whitespace().map(str::to_string).collect(),
            "attack" => header.attack = Some(parse_words(value).ok_or_else(bad)?),
            _ => {}
        }
    }
    Ok(header)
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: String,
    pub source: String,
    pub header: Header,
    pub image: ProgramImage,
}

impl Fixture {
    pub fn parse(name: &str, source: &str) -> Result<Fixture, CorpusError> {
        let header = parse_header(name, source)?;
        let image = assemble(source).map_err(|source| CorpusError::Asm { file: name.to_string(), source })?;
        Ok(Fixture { name: name.to_string(), source: source.to_string(), header, image })
    }

    /// Whether any plugin of `pipeline` is one the attack is meant to be
    /// stopped by.
    pub fn hardened_under(&self, pipeline: &[&str]) -> bool {
        self.header.attack.is_some() && self.header.hardened_by.iter().any(|p| pipeline.contains(&p.as_str()))
    }
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Emit(#[from] EmitError),
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub original: ExecutionResult,
    pub rewritten: ExecutionResult,
}

impl AttackOutcome {
    /// The attack runs to completion on the original and traps on the
    /// rewritten image.
    pub fn stopped(&self) -> bool {
        self.original.termination != Termination::Trap && self.rewritten.termination == Termination::Trap
    }
}

#[derive(Clone, Debug)]
pub struct FixtureCheck {
    pub rewritten: ProgramImage,
    pub report: RoundtripReport,
    pub warnings: Vec<String>,
    /// Present when the pipeline hardens this fixture.
    pub attack: Option<AttackOutcome>,
}

impl FixtureCheck {
    pub fn passed(&self) -> bool {
        self.report.is_equivalent() && self.attack.as_ref().is_none_or(AttackOutcome::stopped)
    }
}

impl Fixture {
    /// Rewrites the fixture through `spec` and compares it with the original
    /// on `inputs`, plus the attack input when the pipeline hardens it.
    pub fn check(&self, spec: &PipelineSpec, inputs: &[Vec<i64>]) -> Result<FixtureCheck, CheckError> {
        let outcome = compose(spec, lift(&self.image)?)?;
        let rewritten = emit(&outcome.ir, &EmitOptions::default())?;
        let report = compare_on_inputs(&self.image, &rewritten, inputs);
        let names: Vec<&str> = spec.stages.iter().map(|s| s.plugin.as_str()).collect();
        let attack = match &self.header.attack {
            Some(words) if self.hardened_under(&names) => Some(AttackOutcome {
                original: execute(&self.image, words, DEFAULT_STEP_LIMIT),
                rewritten: execute(&rewritten, words, DEFAULT_STEP_LIMIT),
            }),
            _ => None,
        };
        Ok(FixtureCheck { rewritten, report, warnings: outcome.warnings, attack })
    }
}

/// Every `*.dasm` file in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Fixture>, CorpusError> {
    fn io(path: &Path) -> impl Fn(std::io::Error) -> CorpusError + '_ {
        move |source| CorpusError::Io { path: path.to_path_buf(), source }
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dasm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let source = std::fs::read_to_string(p).map_err(io(p))?;
            let name = p.file_stem().unwrap_or_default().to_string_lossy();
            Fixture::parse(&name, &source)
        })
        .collect()
}
