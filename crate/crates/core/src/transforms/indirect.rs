use std::collections::BTreeMap;

use super::scratch::Scratch;
use super::{refuse, Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{Analysis, GlobalRef, InstrId, NewInstr, ProgramIR, SpliceMode, Target};
use crate::isa::{Instruction, Opcode, Reg, RegSet};

/// Every known indirect target, each with one jump table slot holding its
/// address. Comparing against the loaded slot keeps the check valid however
/// the emitter later places the code.
pub(crate) fn known_targets(ir: &ProgramIR) -> Vec<(InstrId, GlobalRef)> {
    let mut out: BTreeMap<InstrId, GlobalRef> = BTreeMap::new();
    for obj in ir.data() {
        for (k, &entry) in obj.entries().iter().enumerate() {
            out.entry(entry).or_insert(GlobalRef { object: obj.id, offset: k as i64 });
        }
    }
    out.into_iter().collect()
}

/// `movi s, @slot; load s, s, 0; beq r, s, <target>` for one target.
pub(crate) fn compare(r: Reg, s: Reg, slot: GlobalRef, target: Target) -> [NewInstr; 3] {
    [
        NewInstr::global(Instruction::movi(s, 0), slot),
        NewInstr::plain(Instruction::load(s, s, 0)),
        NewInstr::branch(Instruction::cond(Opcode::Beq, r, s, 0), target),
    ]
}

/// Rewrites every `jmpi`/`calli` as a compare-and-branch chain over the
/// known targets, ending in `trap` for any other value.
pub struct IndirectToDirect;

const NAME: &str = "indirect_to_direct";

impl Plugin for IndirectToDirect {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::IndirectBranches]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::IndirectBranches, Facet::InstructionStream]
    }
    fn requires(&self) -> &'static [Analysis] {
        &[Analysis::Liveness]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        ir.indirect_count()
    }
    fn apply(&self, ir: &ProgramIR, _seed: u64, _config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        let mut out = ir.clone();
        let sites: Vec<_> = ir.instructions().filter(|i| i.indirect).map(|i| (i.id, i.payload, i.fallthrough)).collect();
        if sites.is_empty() {
            out.record_applied(NAME);
            return Ok(out);
        }
        let targets = known_targets(ir);
        if targets.is_empty() {
            return Err(refuse(NAME, format!("{} has no known targets", sites[0].0)));
        }
        let liveness = ir.liveness_or_compute()?.into_owned();
        for (id, payload, return_site) in sites {
            let r = payload.a;
            let scratch = Scratch::pick(liveness.dead_before(id), [r].into_iter().collect::<RegSet>(), 1);
            let s = scratch.regs[0];
            let is_call = payload.op == Opcode::Calli;

            let mut seq: Vec<NewInstr> = scratch.pushes().into_iter().map(NewInstr::plain).collect();
            let chain_len = seq.len() + 3 * targets.len() + 1;
            // trampoline k: restore, then transfer (calls return to the
            // original return site)
            let tramp_len = scratch.saved.len() + 1 + usize::from(is_call);
            let direct = scratch.saved.is_empty() && !is_call;
            for (k, &(t, slot)) in targets.iter().enumerate() {
                let to = if direct { Target::Existing(t) } else { Target::Local(chain_len + k * tramp_len) };
                seq.extend(compare(r, s, slot, to));
            }
            seq.push(NewInstr::plain(Instruction::nullary(Opcode::Trap)));
            if !direct {
                for &(t, _) in &targets {
                    seq.extend(scratch.pops().into_iter().map(NewInstr::plain));
                    if is_call {
                        seq.push(NewInstr::branch(Instruction::imm_only(Opcode::Call, 0), Target::Existing(t)));
                        let back = return_site.expect("calli falls through");
                        seq.push(NewInstr::branch(Instruction::imm_only(Opcode::Jmp, 0), Target::Existing(back)));
                    } else {
                        seq.push(NewInstr::branch(Instruction::imm_only(Opcode::Jmp, 0), Target::Existing(t)));
                    }
                }
            }
            out.splice(id, &seq, SpliceMode::Replace)?;
        }
        out.record_applied(NAME);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitter::{emit, EmitOptions};
    use crate::isa::{assemble, execute};
    use crate::lifter::lift;

    const TWO_TARGETS: &str = "
        .jumptable T: a b
        in r0
        movi r1, @T
        add r1, r1, r0
        load r2, r1, 0
        jmpi r2
    a:  movi r3, 100
        out r3
        halt
    b:  movi r3, 200
        out r3
        halt
    ";

    #[test]
    fn removes_every_indirect_branch() {
        let image = assemble(TWO_TARGETS).unwrap();
        let out = IndirectToDirect.apply(&lift(&image).unwrap(), 0, &PluginConfig::new()).unwrap();
        assert_eq!(out.indirect_count(), 0);
        let img = emit(&out, &EmitOptions::default()).unwrap();
        for x in [0, 1] {
            assert!(execute(&img, &[x], 100).same_behaviour(&execute(&image, &[x], 100)));
        }
    }

    #[test]
    fn calli_goes_through_trampolines() {
        let src = "
            .jumptable F: f g
            in r0
            movi r1, @F
            add r1, r1, r0
            load r2, r1, 0
            calli r2
            out r0
            halt
        f:  movi r0, 7
            ret
        g:  movi r0, 9
            ret
        ";
        let image = assemble(src).unwrap();
        let out = IndirectToDirect.apply(&lift(&image).unwrap(), 0, &PluginConfig::new()).unwrap();
        assert_eq!(out.indirect_count(), 0);
        let img = emit(&out, &EmitOptions::default()).unwrap();
        for x in [0, 1] {
            assert!(execute(&img, &[x], 100).same_behaviour(&execute(&image, &[x], 100)));
        }
    }

    #[test]
    fn no_jumptable_is_refused() {
        let ir = lift(&assemble("in r0\njmpi r0").unwrap()).unwrap();
        assert!(IndirectToDirect.apply(&ir, 0, &PluginConfig::new()).is_err());
    }

    #[test]
    fn program_without_indirects_is_unchanged() {
        let ir = lift(&assemble("in r0\nout r0\nhalt").unwrap()).unwrap();
        let out = IndirectToDirect.apply(&ir, 0, &PluginConfig::new()).unwrap();
        assert_eq!(out.instruction_count(), ir.instruction_count());
    }
}
