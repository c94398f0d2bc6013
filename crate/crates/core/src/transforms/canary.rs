use super::frames::analyze_frames;
use super::scratch::Scratch;
use super::stack_pad::grow_frame;
use super::{refuse, Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{Analysis, NewInstr, ProgramIR, SpliceMode, Target};
use crate::isa::{Instruction, Opcode, Reg, RegSet};
use crate::rng::Xoshiro256StarStar;

/// Stack canaries. Each frame gets one extra slot just above its locals,
/// filled with a seeded word after `enter` and compared before every
/// `leave`; a mismatch executes `trap`.
pub struct Canary;

const NAME: &str = "canary";

impl Plugin for Canary {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::StackFrames]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::StackFrames, Facet::InstructionStream]
    }
    fn requires(&self) -> &'static [Analysis] {
        &[Analysis::Liveness]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        ir.instructions().filter(|i| i.op() == Opcode::Enter).count()
    }
    fn apply(&self, ir: &ProgramIR, seed: u64, _config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        let frames = analyze_frames(ir).map_err(|e| refuse(NAME, e.to_string()))?;
        let liveness = ir.liveness_or_compute()?.into_owned();
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut out = ir.clone();
        for frame in frames.values() {
            let value = rng.next_u64() as i64;
            let slot = frame.size;
            grow_frame(&mut out, frame, 1)?;

            // prologue, right after the enter
            let store = Scratch::pick(liveness.dead_after(frame.enter), RegSet::EMPTY, 1);
            let s = store.regs[0];
            let mut seq = vec![NewInstr::plain(Instruction::imm_only(Opcode::Enter, slot + 1))];
            seq.extend(store.pushes().into_iter().map(NewInstr::plain));
            seq.push(NewInstr::plain(Instruction::movi(s, value)));
            seq.push(NewInstr::plain(Instruction::store(s, Reg::SP, slot + store.depth())));
            seq.extend(store.pops().into_iter().map(NewInstr::plain));
            out.splice(frame.enter, &seq, SpliceMode::Replace)?;

            for &leave in &frame.leaves {
                let check = Scratch::pick(liveness.dead_before(leave), RegSet::EMPTY, 2);
                let (a, b) = (check.regs[0], check.regs[1]);
                let mut seq: Vec<NewInstr> = check.pushes().into_iter().map(NewInstr::plain).collect();
                seq.push(NewInstr::plain(Instruction::load(a, Reg::SP, slot + check.depth())));
                seq.push(NewInstr::plain(Instruction::movi(b, value)));
                let ok = if check.saved.is_empty() { Target::Anchor } else { Target::Local(seq.len() + 2) };
                seq.push(NewInstr::branch(Instruction::cond(Opcode::Beq, a, b, 0), ok));
                seq.push(NewInstr::plain(Instruction::nullary(Opcode::Trap)));
                seq.extend(check.pops().into_iter().map(NewInstr::plain));
                out.splice(leave, &seq, SpliceMode::Before)?;
            }
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

    #[test]
    fn leaf_with_dead_registers_needs_no_push() {
        let src = "call f\nout r0\nhalt\nf: enter 1\nmovi r0, 3\nstore r0, sp, 0\nleave 1\nret";
        let image = assemble(src).unwrap();
        let ir = lift(&image).unwrap();
        let out = Canary.apply(&ir, 5, &PluginConfig::new()).unwrap();
        assert!(!out.instructions().any(|i| matches!(i.op(), Opcode::Push | Opcode::Pop)));
        assert_eq!(out.instruction_count() - ir.instruction_count(), 6);
        let img = emit(&out, &EmitOptions::default()).unwrap();
        assert!(execute(&img, &[], 1000).same_behaviour(&execute(&image, &[], 1000)));
    }

    #[test]
    fn overwriting_the_slot_traps() {
        // writes n input words into a 2-word buffer at [sp+0..n); the word
        // above the buffer is unused until the canary claims it
        let src = "
            enter 2
            in r2
            mov r1, sp
            movi r3, 0
            movi r4, 1
        next:
            beq r3, r2, done
            in r5
            add r6, r1, r3
            store r5, r6, 0
            add r3, r3, r4
            jmp next
        done:
            load r0, sp, 0
            out r0
            leave 2
            halt
        ";
        let image = assemble(src).unwrap();
        let img = emit(&Canary.apply(&lift(&image).unwrap(), 1, &PluginConfig::new()).unwrap(), &EmitOptions::default())
            .unwrap();
        let benign = [2, 10, 20];
        let attack = [3, 10, 20, 99];
        assert_eq!(execute(&image, &benign, 1000).termination, Termination::Halt);
        assert!(execute(&img, &benign, 1000).same_behaviour(&execute(&image, &benign, 1000)));
        assert_eq!(execute(&image, &attack, 1000).termination, Termination::Halt);
        assert_eq!(execute(&img, &attack, 1000).termination, Termination::Trap);
    }

    #[test]
    fn all_live_uses_push_pop_and_stays_equivalent() {
        let src = "
            in r0
            in r1
            in r2
            in r3
            in r4
            in r5
            in r6
            in r7
            call f
            out r0
            out r1
            out r2
            out r3
            out r4
            out r5
            out r6
            out r7
            halt
        f:  enter 0
            leave 0
            ret
        ";
        let image = assemble(src).unwrap();
        let out = Canary.apply(&lift(&image).unwrap(), 2, &PluginConfig::new()).unwrap();
        assert!(out.instructions().any(|i| i.op() == Opcode::Push));
        let img = emit(&out, &EmitOptions::default()).unwrap();
        let input: Vec<i64> = (1..=8).collect();
        assert!(execute(&img, &input, 1000).same_behaviour(&execute(&image, &input, 1000)));
    }
}
