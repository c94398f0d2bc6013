use super::scratch::Scratch;
use super::{config_u64, Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{Analysis, NewInstr, ProgramIR, SpliceMode};
use crate::isa::{Instruction, Opcode, RegSet};
use crate::rng::Xoshiro256StarStar;

/// Adds a seeded pad to the size requested at every `alloc` site.
pub struct HeapPad;

const NAME: &str = "heap_pad";

impl Plugin for HeapPad {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::HeapSizes]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::HeapSizes, Facet::InstructionStream]
    }
    fn requires(&self) -> &'static [Analysis] {
        &[Analysis::Liveness]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        ir.instructions().filter(|i| i.op() == Opcode::Alloc).count()
    }
    fn apply(&self, ir: &ProgramIR, seed: u64, config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        let max = config_u64(NAME, config, "max_pad_words", 8)?;
        let liveness = ir.liveness_or_compute()?.into_owned();
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut out = ir.clone();
        let sites: Vec<_> = ir.instructions().filter(|i| i.op() == Opcode::Alloc).map(|i| (i.id, i.payload)).collect();
        for (id, alloc) in sites {
            let pad = rng.one_to(max) as i64;
            let (dst, size) = (alloc.a, alloc.b);
            // a saved register must survive the alloc, so it cannot be its
            // destination; a dead one may be
            let dead = liveness.dead_before(id);
            let exclude: RegSet = if dead.minus([size].into_iter().collect()).is_empty() {
                [dst, size].into_iter().collect()
            } else {
                [size].into_iter().collect()
            };
            let scratch = Scratch::pick(dead, exclude, 1);
            let s = scratch.regs[0];
            let mut seq: Vec<NewInstr> = scratch.pushes().into_iter().map(NewInstr::plain).collect();
            seq.push(NewInstr::plain(Instruction::movi(s, pad)));
            seq.push(NewInstr::plain(Instruction::arith(Opcode::Add, s, s, size)));
            seq.push(NewInstr::plain(Instruction::alloc(dst, s)));
            seq.extend(scratch.pops().into_iter().map(NewInstr::plain));
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
    use crate::ir::compute_liveness;
    use crate::isa::{assemble, execute};
    use crate::lifter::lift;

    #[test]
    fn no_alloc_means_no_change() {
        let ir = lift(&assemble("in r0\nout r0\nhalt").unwrap()).unwrap();
        let out = HeapPad.apply(&ir, 3, &PluginConfig::new()).unwrap();
        assert_eq!(out.instruction_count(), ir.instruction_count());
        assert_eq!(out.metadata().applied, vec!["heap_pad".to_string()]);
    }

    #[test]
    fn all_live_falls_back_to_push_pop() {
        let src = "
            in r0
            in r1
            in r2
            in r3
            in r4
            in r5
            in r6
            in r7
            alloc r1, r1
            store r2, r1, 0
            out r0
            out r2
            out r3
            out r4
            out r5
            out r6
            out r7
            load r3, r1, 0
            out r3
            halt
        ";
        let image = assemble(src).unwrap();
        let ir = lift(&image).unwrap();
        let live = compute_liveness(&ir).unwrap();
        assert!(live.dead_before(crate::ir::InstrId(8)).is_empty());
        let out = HeapPad.apply(&ir, 9, &PluginConfig::new()).unwrap();
        assert!(out.instructions().any(|i| i.op() == Opcode::Push));
        let img = emit(&out, &EmitOptions::default()).unwrap();
        let input: Vec<i64> = (1..=8).collect();
        assert!(execute(&img, &input, 1000).same_behaviour(&execute(&image, &input, 1000)));
    }

    #[test]
    fn dead_register_path_adds_two_instructions() {
        let image = assemble("in r1\nalloc r0, r1\nstore r1, r0, 0\nload r2, r0, 0\nout r2\nhalt").unwrap();
        let ir = lift(&image).unwrap();
        let out = HeapPad.apply(&ir, 1, &PluginConfig::new()).unwrap();
        assert_eq!(out.instruction_count(), ir.instruction_count() + 2);
        let img = emit(&out, &EmitOptions::default()).unwrap();
        assert!(execute(&img, &[5], 1000).same_behaviour(&execute(&image, &[5], 1000)));
    }
}
