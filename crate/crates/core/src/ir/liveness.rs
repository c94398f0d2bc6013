use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{validate, IrError, InstrId, ProgramIR};
use crate::isa::RegSet;

/// Per-instruction register liveness over `r0`..`r7`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LivenessResult {
    pub live_in: BTreeMap<InstrId, RegSet>,
    pub live_out: BTreeMap<InstrId, RegSet>,
}

impl LivenessResult {
    /// Registers whose value is never read on any path starting at `id`
    /// before being overwritten.
    pub fn dead_before(&self, id: InstrId) -> RegSet {
        self.live_in.get(&id).copied().unwrap_or(RegSet::ALL).complement()
    }

    pub fn dead_after(&self, id: InstrId) -> RegSet {
        self.live_out.get(&id).copied().unwrap_or(RegSet::ALL).complement()
    }
}

/// Backward may-liveness to a fixpoint over the conservative CFG.
pub fn compute_liveness(ir: &ProgramIR) -> Result<LivenessResult, IrError> {
    let report = validate(ir);
    if !report.is_clean() {
        return Err(IrError::Invalid(report));
    }
    let cfg = ir.compute_cfg();
    let preds = cfg.predecessors();
    let mut live_in: BTreeMap<InstrId, RegSet> = ir.instructions().map(|i| (i.id, RegSet::EMPTY)).collect();
    let mut live_out = live_in.clone();

    let mut queue: VecDeque<InstrId> = live_in.keys().rev().copied().collect();
    let mut queued: std::collections::BTreeSet<InstrId> = queue.iter().copied().collect();
    while let Some(id) = queue.pop_front() {
        queued.remove(&id);
        let insn = ir.instr(id).expect("validated");
        let out = cfg
            .successors(id)
            .iter()
            .fold(RegSet::EMPTY, |acc, s| acc.union(live_in[s]));
        let inn = insn.payload.uses().union(out.minus(insn.payload.defs()));
        live_out.insert(id, out);
        if live_in[&id] != inn {
            live_in.insert(id, inn);
            for p in preds.get(&id).into_iter().flatten() {
                if queued.insert(*p) {
                    queue.push_back(*p);
                }
            }
        }
    }
    Ok(LivenessResult { live_in, live_out })
}
