//! Lays a [`ProgramIR`] out as a program image.
//!
//! Blocks are placed in `layout_rank` order. A pinned block is placed at its
//! pinned offset, with `trap` filler records in front of it when the cursor
//! has not reached it yet. A block whose fallthrough successor does not
//! follow it physically gets an explicit `jmp`. Every reference is then
//! patched from the final placement: direct branch immediates, global
//! addresses (recomputed from the current data order) and jump table words.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ir::{validate, GlobalRef, InstrId, IrDataKind, ProgramIR, ValidationReport};
use crate::isa::{
    global_bases, DataKind, DataObject, Instruction, Opcode, Pin, ProgramImage, RECORD_SIZE,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmitOptions {
    /// Rewrite jump table words to the new code offsets. Only ever switched
    /// off to check that the patch-completeness test notices.
    #[doc(hidden)]
    pub patch_jumptables: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions { patch_jumptables: true }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmitError {
    #[error("invalid IR: {0}")]
    Invalid(ValidationReport),
    #[error("instructions {first} and {second} are both pinned at offset {offset}")]
    PinConflict { first: InstrId, second: InstrId, offset: u32 },
    #[error("{instr} is pinned at {pin} but layout already reaches {cursor}")]
    PinUnreachable { instr: InstrId, pin: u32, cursor: u32 },
    #[error("emitted image is malformed: {0}")]
    Malformed(String),
}

/// Emits the image.
pub fn emit(ir: &ProgramIR, options: &EmitOptions) -> Result<ProgramImage, EmitError> {
    emit_with_map(ir, options).map(|(image, _)| image)
}

/// Emits the image and returns the final record offset of every IR
/// instruction.
pub fn emit_with_map(ir: &ProgramIR, options: &EmitOptions) -> Result<(ProgramImage, BTreeMap<InstrId, u32>), EmitError> {
    let report = validate(ir);
    if !report.is_clean() {
        return Err(EmitError::Invalid(report));
    }
    let mut by_offset: BTreeMap<u32, InstrId> = BTreeMap::new();
    for (&id, &pin) in ir.pins() {
        if let Some(&first) = by_offset.get(&pin) {
            return Err(EmitError::PinConflict { first, second: id, offset: pin });
        }
        by_offset.insert(pin, id);
    }

    enum Slot {
        Ir(InstrId),
        Jump(InstrId),
        Filler,
    }
    let order = ir.layout_order();
    let pin_of = |k: usize| ir.pins().get(&order[k].first()).copied();
    let mut slots: Vec<Slot> = Vec::with_capacity(ir.instruction_count() + order.len());
    let mut placed: BTreeMap<InstrId, u32> = BTreeMap::new();

    for k in 0..order.len() {
        let block = order[k];
        if let Some(pin) = pin_of(k) {
            let cursor = slots.len() as u32;
            if cursor > pin {
                return Err(EmitError::PinUnreachable { instr: block.first(), pin, cursor });
            }
            slots.extend((cursor..pin).map(|_| Slot::Filler));
        }
        for &m in &block.members {
            placed.insert(m, slots.len() as u32);
            slots.push(Slot::Ir(m));
        }
        let last = ir.instr(block.last()).expect("validated");
        if let Some(ft) = last.fallthrough {
            let here = slots.len() as u32;
            let adjacent = k + 1 < order.len()
                && order[k + 1].first() == ft
                && pin_of(k + 1).is_none_or(|p| p == here);
            if !adjacent {
                slots.push(Slot::Jump(ft));
            }
        }
    }

    let bases = global_bases(ir.data().iter().map(|d| d.len()));
    let base_of: BTreeMap<_, _> = ir.data().iter().zip(&bases).map(|(d, &b)| (d.id, b)).collect();
    let global_addr = |g: GlobalRef| base_of[&g.object] + g.offset;

    let mut code: Vec<Instruction> = slots
        .iter()
        .map(|slot| match *slot {
            Slot::Filler => Instruction::nullary(Opcode::Trap),
            Slot::Jump(to) => Instruction::imm_only(Opcode::Jmp, placed[&to] as i64),
            Slot::Ir(id) => {
                let insn = ir.instr(id).expect("validated");
                let mut payload = insn.payload;
                if let Some(t) = insn.target {
                    payload.imm = placed[&t] as i64;
                }
                if let Some(g) = insn.global_ref {
                    payload.imm = global_addr(g);
                }
                payload
            }
        })
        .collect();
    code.extend(ir.dead_code().iter().map(|d| d.instruction));

    let data = ir
        .data()
        .iter()
        .map(|obj| match &obj.kind {
            IrDataKind::Raw(words) => DataObject { name_hash: obj.name_hash, kind: DataKind::Raw, words: words.clone() },
            IrDataKind::JumpTable(entries) => {
                let words = entries
                    .iter()
                    .map(|e| {
                        let offset = if options.patch_jumptables {
                            placed[e]
                        } else {
                            ir.instr(*e).and_then(|i| i.original_offset).unwrap_or(0)
                        };
                        offset as i64 * RECORD_SIZE as i64
                    })
                    .collect();
                DataObject { name_hash: obj.name_hash, kind: DataKind::JumpTable, words }
            }
        })
        .collect();

    let mut pins: Vec<Pin> = ir
        .pins()
        .iter()
        .map(|(id, &placement)| Pin { instruction: placed[id], placement })
        .collect();
    pins.sort_by_key(|p| p.instruction);

    let image = ProgramImage { entry: placed[&ir.entry()], code, data, pins };
    image.check().map_err(EmitError::Malformed)?;
    Ok((image, placed))
}
