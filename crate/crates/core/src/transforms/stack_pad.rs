use super::frames::{analyze_frames, Frame};
use super::{config_u64, refuse, Facet, Plugin, PluginConfig, TransformError};
use crate::ir::{IrError, ProgramIR};
use crate::isa::{Instruction, Opcode};
use crate::rng::Xoshiro256StarStar;

/// Grows every frame by a seeded number of words. The pad sits between the
/// locals and the return address, so locals keep their offsets (and any
/// pointer taken to them stays valid); accesses to the return address and
/// caller arguments are shifted past the pad.
pub struct StackPad;

const NAME: &str = "stack_pad";

/// Adds `pad` words to a frame: `enter`/`leave` sizes grow, and every
/// `sp`-relative access above the locals moves up by `pad`.
pub(crate) fn grow_frame(ir: &mut ProgramIR, frame: &Frame, pad: i64) -> Result<(), IrError> {
    let size = frame.size + pad;
    ir.set_payload(frame.enter, Instruction::imm_only(Opcode::Enter, size))?;
    for &leave in &frame.leaves {
        ir.set_payload(leave, Instruction::imm_only(Opcode::Leave, size))?;
    }
    for access in &frame.accesses {
        let mut payload = ir.instr(access.instr).ok_or(IrError::UnknownInstruction(access.instr))?.payload;
        if frame.above_locals(access, payload.imm) {
            payload.imm += pad;
            ir.set_payload(access.instr, payload)?;
        }
    }
    Ok(())
}

impl Plugin for StackPad {
    fn name(&self) -> &'static str {
        NAME
    }
    fn reads(&self) -> &'static [Facet] {
        &[Facet::StackFrames]
    }
    fn writes(&self) -> &'static [Facet] {
        &[Facet::StackFrames]
    }
    fn work_items(&self, ir: &ProgramIR) -> usize {
        ir.instructions().filter(|i| i.op() == Opcode::Enter).count()
    }
    fn apply(&self, ir: &ProgramIR, seed: u64, config: &PluginConfig) -> Result<ProgramIR, TransformError> {
        let max = config_u64(NAME, config, "max_pad_words", 16)?;
        let frames = analyze_frames(ir).map_err(|e| refuse(NAME, e.to_string()))?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut out = ir.clone();
        for frame in frames.values() {
            let pad = rng.one_to(max) as i64;
            grow_frame(&mut out, frame, pad)?;
        }
        out.record_applied(NAME);
        Ok(out)
    }
}
