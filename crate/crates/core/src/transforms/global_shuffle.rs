use super::{refuse, Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{DataId, ProgramIR};
use crate::rng::Xoshiro256StarStar;

/// Permutes the data table, which moves every object's base address. The
/// emitter recomputes each global reference from the new order.
pub struct GlobalShuffle;

const NAME: &str = "global_shuffle";

impl Plugin for GlobalShuffle {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::GlobalLayout]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::GlobalLayout]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        match ir.data().len() {
            0 | 1 => 0,
            n => n,
        }
    }
    fn apply(&self, ir: &ProgramIR, seed: u64, _config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        if let Some(bad) = ir.instructions().find(|i| i.ambiguous_global) {
            return Err(refuse(
                NAME,
                format!("immediate {} at {} lies in the global region but matches no object", bad.payload.imm, bad.id),
            ));
        }
        let mut order: Vec<DataId> = ir.data().iter().map(|d| d.id).collect();
        Xoshiro256StarStar::seed_from_u64(seed).shuffle(&mut order);
        let mut out = ir.clone();
        out.set_data_order(&order)?;
        out.record_applied(NAME);
        Ok(out)
    }
}
