use super::indirect::{compare, known_targets};
use super::scratch::Scratch;
use super::{Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{Analysis, NewInstr, ProgramIR, SpliceMode, Target};
use crate::isa::{Instruction, Opcode, RegSet};

/// Guards every `jmpi`/`calli` with a membership check of its target
/// register against the known targets; anything else executes `trap`.
pub struct CfiCheck;

const NAME: &str = "cfi_check";

impl Plugin for CfiCheck {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::IndirectBranches]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::InstructionStream]
    }
    fn requires(&self) -> &'static [Analysis] {
        &[Analysis::Liveness]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        ir.indirect_count()
    }
    fn idle_warning(&self) -> Option<&'static str> {
        Some("no indirect branches to instrument")
    }
    fn apply(&self, ir: &ProgramIR, _seed: u64, _config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        let mut out = ir.clone();
        let sites: Vec<_> = ir.instructions().filter(|i| i.indirect).map(|i| (i.id, i.payload.a)).collect();
        let targets = known_targets(ir);
        let liveness = if sites.is_empty() { None } else { Some(ir.liveness_or_compute()?.into_owned()) };
        for (id, r) in sites {
            let dead = liveness.as_ref().unwrap().dead_before(id);
            let scratch = Scratch::pick(dead, [r].into_iter().collect::<RegSet>(), 1);
            let s = scratch.regs[0];
            let mut seq: Vec<NewInstr> = scratch.pushes().into_iter().map(NewInstr::plain).collect();
            let pass = if scratch.saved.is_empty() {
                Target::Anchor
            } else {
                Target::Local(seq.len() + 3 * targets.len() + 1)
            };
            for &(_, slot) in &targets {
                seq.extend(compare(r, s, slot, pass));
            }
            seq.push(NewInstr::plain(Instruction::nullary(Opcode::Trap)));
            seq.extend(scratch.pops().into_iter().map(NewInstr::plain));
            out.splice(id, &seq, SpliceMode::Before)?;
        }
        out.record_applied(NAME);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitter::{emit, EmitOptions};
    use crate::isa::{assemble, execute, Termination};
    use crate::lifter::lift;

    // input 0/1 selects a table slot; input 2 jumps straight to the byte
    // offset given by the next input word
    const SRC: &str = "
        .jumptable T: a b
        in r0
        movi r4, 2
        beq r0, r4, raw
        movi r1, @T
        add r1, r1, r0
        load r2, r1, 0
        jmp go
    raw:
        in r2
    go: jmpi r2
    a:  movi r3, 100
        out r3
        halt
    b:  movi r3, 200
        out r3
        halt
    c:  movi r3, 300
        out r3
        halt
    ";

    #[test]
    fn in_set_targets_are_unchanged() {
        let image = assemble(SRC).unwrap();
        let img = emit(&CfiCheck.apply(&lift(&image).unwrap(), 0, &PluginConfig::new()).unwrap(), &EmitOptions::default())
            .unwrap();
        for x in [0, 1] {
            assert!(execute(&img, &[x], 100).same_behaviour(&execute(&image, &[x], 100)));
        }
    }

    #[test]
    fn corrupted_target_traps_only_after_transform() {
        let image = assemble(SRC).unwrap();
        let img = emit(&CfiCheck.apply(&lift(&image).unwrap(), 0, &PluginConfig::new()).unwrap(), &EmitOptions::default())
            .unwrap();
        // record 15 is `c`
        let attack = [2, 15 * 16];
        let before = execute(&image, &attack, 100);
        assert_eq!(before.output, vec![300]);
        assert_eq!(before.termination, Termination::Halt);
        assert_eq!(execute(&img, &attack, 100).termination, Termination::Trap);
    }

    #[test]
    fn no_indirects_is_identity() {
        let ir = lift(&assemble("in r0\nout r0\nhalt").unwrap()).unwrap();
        let out = CfiCheck.apply(&ir, 0, &PluginConfig::new()).unwrap();
        assert_eq!(out.instruction_count(), ir.instruction_count());
    }
}
