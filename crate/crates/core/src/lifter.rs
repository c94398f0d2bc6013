//! Lifting a program image into [`ProgramIR`], and the round-trip check
//! that lifting followed by emission preserves behaviour.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emitter::{emit, EmitError, EmitOptions};
use crate::ir::{
    BasicBlock, BlockId, DataId, DeadRecord, GlobalRef, InstrId, IrDataKind, IrDataObject, IrInstruction, IrParts,
    Metadata, ProgramIR,
};
use crate::isa::{
    execute, DataKind, ExecutionResult, Opcode, ProgramImage, DEFAULT_STEP_LIMIT, GLOBAL_BASE, HEAP_BASE, RECORD_SIZE,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LiftError {
    #[error("image has no instructions")]
    EmptyCode,
    #[error("entry {0} out of range")]
    EntryOutOfRange(u32),
    #[error("misaligned jump table entry {word} in #{object:016x}")]
    MisalignedJumpTableEntry { object: u64, word: i64 },
    #[error("record {at}: branch target {target} out of range")]
    BranchOutOfRange { at: u32, target: i64 },
    #[error("record {at}: execution falls off the end of the code")]
    FallsOffEnd { at: u32 },
    #[error("pin on record {0} out of range")]
    PinOutOfRange(u32),
}

/// Recovers the IR of `image`. Code reachable from the entry, any jump
/// table entry or any pinned record is lifted; the rest is kept as dead
/// records.
pub fn lift(image: &ProgramImage) -> Result<ProgramIR, LiftError> {
    let len = image.code.len() as u32;
    if len == 0 {
        return Err(LiftError::EmptyCode);
    }
    if image.entry >= len {
        return Err(LiftError::EntryOutOfRange(image.entry));
    }

    let mut roots = vec![image.entry];
    let mut data = Vec::with_capacity(image.data.len());
    for (k, obj) in image.data.iter().enumerate() {
        let kind = match obj.kind {
            DataKind::Raw => IrDataKind::Raw(obj.words.clone()),
            DataKind::JumpTable => {
                let mut entries = Vec::with_capacity(obj.words.len());
                for &w in &obj.words {
                    if w < 0 || !(w as u64).is_multiple_of(RECORD_SIZE) || w as u64 / RECORD_SIZE >= len as u64 {
                        return Err(LiftError::MisalignedJumpTableEntry { object: obj.name_hash, word: w });
                    }
                    let idx = (w as u64 / RECORD_SIZE) as u32;
                    roots.push(idx);
                    entries.push(InstrId(idx));
                }
                IrDataKind::JumpTable(entries)
            }
        };
        data.push(IrDataObject { id: DataId(k as u32), name_hash: obj.name_hash, kind });
    }
    let mut pins = BTreeMap::new();
    for pin in &image.pins {
        if pin.instruction >= len {
            return Err(LiftError::PinOutOfRange(pin.instruction));
        }
        roots.push(pin.instruction);
        pins.insert(InstrId(pin.instruction), pin.placement);
    }

    let mut reached = BTreeSet::new();
    while let Some(i) = roots.pop() {
        if !reached.insert(i) {
            continue;
        }
        let insn = image.code[i as usize];
        if insn.op.is_direct_branch() {
            if insn.imm < 0 || insn.imm >= len as i64 {
                return Err(LiftError::BranchOutOfRange { at: i, target: insn.imm });
            }
            roots.push(insn.imm as u32);
        }
        if insn.op.falls_through() {
            if i + 1 >= len {
                return Err(LiftError::FallsOffEnd { at: i });
            }
            roots.push(i + 1);
        }
    }

    let bases = image.global_bases();
    let attribute = |imm: i64| -> Option<GlobalRef> {
        image.data.iter().zip(&bases).enumerate().find_map(|(k, (obj, &base))| {
            let off = imm - base;
            (0..=obj.words.len() as i64)
                .contains(&off)
                .then_some(GlobalRef { object: DataId(k as u32), offset: off })
        })
    };

    let mut instructions = BTreeMap::new();
    for &i in &reached {
        let insn = image.code[i as usize];
        let carries_address = matches!(insn.op, Opcode::Movi | Opcode::Load | Opcode::Store);
        let global_ref = if carries_address { attribute(insn.imm) } else { None };
        let in_global_region = (GLOBAL_BASE..HEAP_BASE).contains(&insn.imm);
        instructions.insert(
            InstrId(i),
            IrInstruction {
                id: InstrId(i),
                payload: insn,
                original_offset: Some(i),
                fallthrough: insn.op.falls_through().then_some(InstrId(i + 1)),
                target: insn.op.is_direct_branch().then_some(InstrId(insn.imm as u32)),
                indirect: insn.op.is_indirect(),
                global_ref,
                ambiguous_global: carries_address && global_ref.is_none() && in_global_region,
            },
        );
    }

    // maximal runs of consecutive reachable records; normalisation splits
    // them at leaders and control transfers
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut prev: Option<u32> = None;
    for &i in &reached {
        if prev.is_some_and(|p| p + 1 == i) {
            blocks.last_mut().unwrap().members.push(InstrId(i));
        } else {
            let rank = blocks.len() as u32;
            blocks.push(BasicBlock {
                id: BlockId(rank),
                members: vec![InstrId(i)],
                successors: Vec::new(),
                layout_rank: rank,
            });
        }
        prev = Some(i);
    }

    let dead_code = (0..len)
        .filter(|i| !reached.contains(i))
        .map(|i| DeadRecord { original_offset: i, instruction: image.code[i as usize] })
        .collect();

    let mut ir = ProgramIR::from_parts(IrParts {
        instructions,
        blocks,
        data,
        entry: Some(InstrId(image.entry)),
        pins,
        metadata: Metadata::default(),
        dead_code,
        analyses: Default::default(),
    });
    ir.normalize_blocks();
    Ok(ir)
}

#[derive(Debug, Error)]
pub enum RoundtripError {
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Emit(#[from] EmitError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub input_index: usize,
    pub input: Vec<i64>,
    pub original: ExecutionResult,
    pub rewritten: ExecutionResult,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub inputs_checked: usize,
    pub byte_identical: bool,
    pub divergences: Vec<Divergence>,
}

impl RoundtripReport {
    pub fn is_equivalent(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Lifts and re-emits `image` without transforming it, then runs both on
/// every input and reports any behavioural difference.
pub fn roundtrip_check(image: &ProgramImage, inputs: &[Vec<i64>]) -> Result<RoundtripReport, RoundtripError> {
    let ir = lift(image)?;
    let rebuilt = emit(&ir, &EmitOptions::default())?;
    Ok(compare_on_inputs(image, &rebuilt, inputs))
}

/// Runs two images on the same inputs and collects divergences.
pub fn compare_on_inputs(original: &ProgramImage, rewritten: &ProgramImage, inputs: &[Vec<i64>]) -> RoundtripReport {
    let divergences = inputs
        .iter()
        .enumerate()
        .filter_map(|(k, input)| {
            let a = execute(original, input, DEFAULT_STEP_LIMIT);
            let b = execute(rewritten, input, DEFAULT_STEP_LIMIT);
            (!a.same_behaviour(&b)).then(|| Divergence { input_index: k, input: input.clone(), original: a, rewritten: b })
        })
        .collect();
    RoundtripReport {
        inputs_checked: inputs.len(),
        byte_identical: original.to_bytes() == rewritten.to_bytes(),
        divergences,
    }
}
