use std::time::Duration;

use helix_core::emitter::{emit, EmitOptions};
use helix_core::isa::ProgramImage;
use helix_core::lifter::lift;
use helix_core::transforms::{compose, PipelineSpec};

/// Produces one variant of a base image. Runs outside any registry lock.
pub trait Generator: Send + Sync {
    fn generate(&self, base: &ProgramImage, spec: &PipelineSpec) -> Result<ProgramImage, String>;
}

/// Lift, run the pipeline, emit.
#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineGenerator;

impl Generator for PipelineGenerator {
    fn generate(&self, base: &ProgramImage, spec: &PipelineSpec) -> Result<ProgramImage, String> {
        let ir = lift(base).map_err(|e| e.to_string())?;
        let out = compose(spec, ir).map_err(|e| e.to_string())?;
        emit(&out.ir, &EmitOptions::default()).map_err(|e| e.to_string())
    }
}

/// Sleeps before delegating, to model slow generation.
pub struct DelayedGenerator<G> {
    pub delay: Duration,
    pub inner: G,
}

impl<G: Generator> Generator for DelayedGenerator<G> {
    fn generate(&self, base: &ProgramImage, spec: &PipelineSpec) -> Result<ProgramImage, String> {
        std::thread::sleep(self.delay);
        self.inner.generate(base, spec)
    }
}
