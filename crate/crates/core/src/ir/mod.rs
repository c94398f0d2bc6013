//! Rewriter intermediate representation.
//!
//! Everything refers to everything else by symbolic id: branch targets,
//! fallthroughs, jump table entries, pins and global references. Offsets only
//! reappear when the emitter lays the program out again, which is what lets
//! transforms move code and data freely.
//!
//! Every mutating method keeps referential integrity (or fails without
//! changing anything) and marks the cached analyses invalid.

mod dump;
mod liveness;
mod validate;

pub use liveness::{compute_liveness, LivenessResult};
pub use validate::{validate, ValidationReport, Violation};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Instruction, Opcode, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstrId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataId(pub u32);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}
impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}
impl fmt::Display for DataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// An immediate that denotes `base(object) + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlobalRef {
    pub object: DataId,
    pub offset: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IrInstruction {
    pub id: InstrId,
    /// For direct branches the immediate is ignored; `target` is authoritative.
    pub payload: Instruction,
    pub original_offset: Option<u32>,
    pub fallthrough: Option<InstrId>,
    pub target: Option<InstrId>,
    pub indirect: bool,
    pub global_ref: Option<GlobalRef>,
    /// Immediate lies in the global region but matches no object.
    pub ambiguous_global: bool,
}

impl IrInstruction {
    pub fn op(&self) -> Opcode {
        self.payload.op
    }

    /// Direct branch targets (at most one in this ISA).
    pub fn branch_targets(&self) -> impl Iterator<Item = InstrId> + '_ {
        self.target.iter().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IrDataKind {
    Raw(Vec<i64>),
    JumpTable(Vec<InstrId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IrDataObject {
    pub id: DataId,
    pub name_hash: u64,
    pub kind: IrDataKind,
}

impl IrDataObject {
    pub fn len(&self) -> usize {
        match &self.kind {
            IrDataKind::Raw(w) => w.len(),
            IrDataKind::JumpTable(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> &[InstrId] {
        match &self.kind {
            IrDataKind::JumpTable(e) => e,
            IrDataKind::Raw(_) => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub members: Vec<InstrId>,
    pub successors: Vec<BlockId>,
    pub layout_rank: u32,
}

impl BasicBlock {
    pub fn first(&self) -> InstrId {
        self.members[0]
    }
    pub fn last(&self) -> InstrId {
        *self.members.last().expect("empty block")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Metadata {
    pub word_bits: u32,
    pub format_version: u16,
    /// Plugins applied so far, in order.
    pub applied: Vec<String>,
}

impl Default for Metadata {
    fn default() -> Self {
        Metadata {
            word_bits: 64,
            format_version: FORMAT_VERSION,
            applied: Vec::new(),
        }
    }
}

/// A code record the lifter found unreachable; emitted verbatim after all
/// blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeadRecord {
    pub original_offset: u32,
    pub instruction: Instruction,
}

/// Instruction-level control flow: `call` edges go to the callee, `ret`
/// edges to every return site, and indirect transfers to every jump table
/// entry.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cfg {
    pub successors: BTreeMap<InstrId, Vec<InstrId>>,
}

impl Cfg {
    pub fn successors(&self, id: InstrId) -> &[InstrId] {
        self.successors.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn predecessors(&self) -> BTreeMap<InstrId, Vec<InstrId>> {
        let mut preds: BTreeMap<InstrId, Vec<InstrId>> =
            self.successors.keys().map(|&k| (k, Vec::new())).collect();
        for (&from, succs) in &self.successors {
            for &to in succs {
                preds.entry(to).or_default().push(from);
            }
        }
        preds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Cfg,
    Liveness,
}

impl Analysis {
    pub const ALL: &'static [Analysis] = &[Analysis::Cfg, Analysis::Liveness];
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cached<T> {
    pub value: T,
    pub valid: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Analyses {
    pub cfg: Option<Cached<Cfg>>,
    pub liveness: Option<Cached<LivenessResult>>,
}

impl Analyses {
    fn invalidate(&mut self) {
        if let Some(c) = &mut self.cfg {
            c.valid = false;
        }
        if let Some(l) = &mut self.liveness {
            l.valid = false;
        }
    }
}

/// Raw, unchecked contents of a [`ProgramIR`]. Anything may be built from
/// parts; [`validate`] reports what is wrong with it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrParts {
    pub instructions: BTreeMap<InstrId, IrInstruction>,
    pub blocks: Vec<BasicBlock>,
    pub data: Vec<IrDataObject>,
    pub entry: Option<InstrId>,
    pub pins: BTreeMap<InstrId, u32>,
    pub metadata: Metadata,
    pub dead_code: Vec<DeadRecord>,
    pub analyses: Analyses,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramIR {
    parts: IrParts,
    next_instr: u32,
    next_block: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("no instruction {0}")]
    UnknownInstruction(InstrId),
    #[error("no block {0}")]
    UnknownBlock(BlockId),
    #[error("no data object {0}")]
    UnknownData(DataId),
    #[error("{0} is still referenced and has no fallthrough to redirect to")]
    StillReferenced(InstrId),
    #[error("changing {0} would alter its control-flow shape")]
    ControlShapeChange(InstrId),
    #[error("not a permutation: {0}")]
    NotPermutation(&'static str),
    #[error("bad instruction sequence: {0}")]
    BadSequence(String),
    #[error("invalid IR: {0}")]
    Invalid(ValidationReport),
}

/// Where a spliced branch goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    None,
    /// The anchor instruction of the splice (only when inserting before it).
    Anchor,
    Existing(InstrId),
    /// Another item of the same sequence, by index.
    Local(usize),
}

/// One instruction of a spliced sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NewInstr {
    pub payload: Instruction,
    pub target: Target,
    pub global_ref: Option<GlobalRef>,
}

impl NewInstr {
    pub fn plain(payload: Instruction) -> Self {
        NewInstr { payload, target: Target::None, global_ref: None }
    }
    pub fn branch(payload: Instruction, target: Target) -> Self {
        NewInstr { payload, target, global_ref: None }
    }
    pub fn global(payload: Instruction, global_ref: GlobalRef) -> Self {
        NewInstr { payload, target: Target::None, global_ref: Some(global_ref) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpliceMode {
    /// Sequence runs before the anchor; references to the anchor now reach
    /// the sequence head.
    Before,
    /// Sequence takes the anchor's place; the anchor is removed.
    Replace,
}

impl ProgramIR {
    pub fn from_parts(parts: IrParts) -> ProgramIR {
        let next_instr = parts.instructions.keys().last().map_or(0, |i| i.0 + 1);
        let next_block = parts.blocks.iter().map(|b| b.id.0 + 1).max().unwrap_or(0);
        ProgramIR { parts, next_instr, next_block }
    }

    pub fn into_parts(self) -> IrParts {
        self.parts
    }

    pub fn parts(&self) -> &IrParts {
        &self.parts
    }

    pub fn entry(&self) -> InstrId {
        self.parts.entry.expect("IR without entry")
    }

    pub fn instr(&self, id: InstrId) -> Option<&IrInstruction> {
        self.parts.instructions.get(&id)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &IrInstruction> {
        self.parts.instructions.values()
    }

    pub fn instruction_count(&self) -> usize {
        self.parts.instructions.len()
    }

    pub fn blocks(&self) -> &[BasicBlock] {
        &self.parts.blocks
    }

    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.parts.blocks.iter().find(|b| b.id == id)
    }

    pub fn block_of(&self, id: InstrId) -> Option<&BasicBlock> {
        self.parts.blocks.iter().find(|b| b.members.contains(&id))
    }

    /// Blocks sorted by `layout_rank`.
    pub fn layout_order(&self) -> Vec<&BasicBlock> {
        let mut blocks: Vec<&BasicBlock> = self.parts.blocks.iter().collect();
        blocks.sort_by_key(|b| (b.layout_rank, b.id));
        blocks
    }

    pub fn data(&self) -> &[IrDataObject] {
        &self.parts.data
    }

    pub fn data_object(&self, id: DataId) -> Option<&IrDataObject> {
        self.parts.data.iter().find(|d| d.id == id)
    }

    pub fn pins(&self) -> &BTreeMap<InstrId, u32> {
        &self.parts.pins
    }

    pub fn metadata(&self) -> &Metadata {
        &self.parts.metadata
    }

    pub fn dead_code(&self) -> &[DeadRecord] {
        &self.parts.dead_code
    }

    pub fn analyses(&self) -> &Analyses {
        &self.parts.analyses
    }

    pub fn is_valid(&self, analysis: Analysis) -> bool {
        match analysis {
            Analysis::Cfg => self.parts.analyses.cfg.as_ref().is_some_and(|c| c.valid),
            Analysis::Liveness => self.parts.analyses.liveness.as_ref().is_some_and(|c| c.valid),
        }
    }

    /// Cached liveness, if present and valid.
    pub fn liveness(&self) -> Option<&LivenessResult> {
        self.parts.analyses.liveness.as_ref().filter(|c| c.valid).map(|c| &c.value)
    }

    /// Cached liveness if valid, otherwise a fresh computation.
    pub fn liveness_or_compute(&self) -> Result<std::borrow::Cow<'_, LivenessResult>, IrError> {
        match self.liveness() {
            Some(l) => Ok(std::borrow::Cow::Borrowed(l)),
            None => compute_liveness(self).map(std::borrow::Cow::Owned),
        }
    }

    pub fn cfg(&self) -> Option<&Cfg> {
        self.parts.analyses.cfg.as_ref().filter(|c| c.valid).map(|c| &c.value)
    }

    /// Union of all jump table entries: the conservative target set of every
    /// indirect transfer.
    pub fn indirect_targets(&self) -> BTreeSet<InstrId> {
        self.parts.data.iter().flat_map(|d| d.entries().iter().copied()).collect()
    }

    /// Fallthroughs of every `call`/`calli`: where a `ret` may land.
    pub fn return_sites(&self) -> BTreeSet<InstrId> {
        self.instructions()
            .filter(|i| matches!(i.op(), Opcode::Call | Opcode::Calli))
            .filter_map(|i| i.fallthrough)
            .collect()
    }

    /// Instruction-level successors under the conservative CFG model.
    pub fn compute_cfg(&self) -> Cfg {
        let indirect = self.indirect_targets();
        let returns = self.return_sites();
        let successors = self
            .parts
            .instructions
            .values()
            .map(|i| (i.id, instr_successors(i, &indirect, &returns)))
            .collect();
        Cfg { successors }
    }

    pub fn indirect_count(&self) -> usize {
        self.instructions().filter(|i| i.indirect).count()
    }

    /// Recomputes the selected analyses and marks them valid, leaving the
    /// others untouched.
    pub fn reanalyze(mut self, which: &[Analysis]) -> Result<ProgramIR, IrError> {
        let report = validate(&self);
        if !report.is_clean() {
            return Err(IrError::Invalid(report));
        }
        for a in which {
            match a {
                Analysis::Cfg => {
                    self.parts.analyses.cfg = Some(Cached { value: self.compute_cfg(), valid: true })
                }
                Analysis::Liveness => {
                    let value = compute_liveness(&self)?;
                    self.parts.analyses.liveness = Some(Cached { value, valid: true });
                }
            }
        }
        Ok(self)
    }

    fn touch(&mut self) {
        self.parts.analyses.invalidate();
    }

    fn instr_mut(&mut self, id: InstrId) -> Result<&mut IrInstruction, IrError> {
        self.parts.instructions.get_mut(&id).ok_or(IrError::UnknownInstruction(id))
    }

    /// Replaces an instruction's payload. The opcode may change only within
    /// the same control-flow shape.
    pub fn set_payload(&mut self, id: InstrId, payload: Instruction) -> Result<(), IrError> {
        let insn = self.instr_mut(id)?;
        let (old, new) = (insn.payload.op, payload.op);
        if old.falls_through() != new.falls_through()
            || old.is_direct_branch() != new.is_direct_branch()
            || old.is_indirect() != new.is_indirect()
            || old.ends_block() != new.ends_block()
        {
            return Err(IrError::ControlShapeChange(id));
        }
        insn.payload = payload.canonical();
        self.touch();
        Ok(())
    }

    pub fn set_global_ref(&mut self, id: InstrId, global_ref: Option<GlobalRef>) -> Result<(), IrError> {
        if let Some(g) = global_ref {
            let obj = self.data_object(g.object).ok_or(IrError::UnknownData(g.object))?;
            if g.offset < 0 || g.offset > obj.len() as i64 {
                return Err(IrError::BadSequence(format!("global offset {} outside {}", g.offset, g.object)));
            }
        }
        self.instr_mut(id)?.global_ref = global_ref;
        self.touch();
        Ok(())
    }

    pub fn set_pin(&mut self, id: InstrId, placement: Option<u32>) -> Result<(), IrError> {
        self.instr_mut(id)?;
        match placement {
            Some(p) => self.parts.pins.insert(id, p),
            None => self.parts.pins.remove(&id),
        };
        self.normalize_blocks();
        self.touch();
        Ok(())
    }

    /// Assigns layout ranks: `order[k]` gets rank `k`.
    pub fn set_layout_order(&mut self, order: &[BlockId]) -> Result<(), IrError> {
        let given: BTreeSet<BlockId> = order.iter().copied().collect();
        let have: BTreeSet<BlockId> = self.parts.blocks.iter().map(|b| b.id).collect();
        if given != have || order.len() != have.len() {
            return Err(IrError::NotPermutation("layout order"));
        }
        for (rank, id) in order.iter().enumerate() {
            let b = self.parts.blocks.iter_mut().find(|b| b.id == *id).unwrap();
            b.layout_rank = rank as u32;
        }
        self.touch();
        Ok(())
    }

    /// Reorders the data table (and therefore every global base address).
    pub fn set_data_order(&mut self, order: &[DataId]) -> Result<(), IrError> {
        let given: BTreeSet<DataId> = order.iter().copied().collect();
        let have: BTreeSet<DataId> = self.parts.data.iter().map(|d| d.id).collect();
        if given != have || order.len() != have.len() {
            return Err(IrError::NotPermutation("data order"));
        }
        let mut old = std::mem::take(&mut self.parts.data);
        for id in order {
            let pos = old.iter().position(|d| d.id == *id).unwrap();
            self.parts.data.push(old.swap_remove(pos));
        }
        self.touch();
        Ok(())
    }

    pub fn record_applied(&mut self, plugin: &str) {
        self.parts.metadata.applied.push(plugin.to_string());
    }

    /// Inserts one non-branching instruction before `anchor`.
    pub fn insert_before(&mut self, anchor: InstrId, payload: Instruction) -> Result<InstrId, IrError> {
        Ok(self.splice(anchor, &[NewInstr::plain(payload)], SpliceMode::Before)?[0])
    }

    /// Inserts one non-branching instruction between `anchor` and its
    /// fallthrough.
    pub fn insert_after(&mut self, anchor: InstrId, payload: Instruction) -> Result<InstrId, IrError> {
        let next = self.instr(anchor).ok_or(IrError::UnknownInstruction(anchor))?;
        if next.op().ends_block() {
            return Err(IrError::BadSequence(format!("cannot insert after block-ending {anchor}")));
        }
        let anchor_ft = next.fallthrough.ok_or(IrError::StillReferenced(anchor))?;
        let original = self.parts.instructions[&anchor].payload;
        let ids = self.splice(
            anchor,
            &[NewInstr::plain(original), NewInstr::plain(payload)],
            SpliceMode::Replace,
        )?;
        debug_assert_eq!(self.instr(ids[1]).unwrap().fallthrough, Some(anchor_ft));
        Ok(ids[1])
    }

    /// Splices a linear sequence at `anchor`. Items fall through to the next
    /// item; the last one falls through to the anchor (`Before`) or to the
    /// anchor's fallthrough (`Replace`). Every reference to the anchor is
    /// redirected to the first item. Returns the new ids in sequence order.
    pub fn splice(&mut self, anchor: InstrId, seq: &[NewInstr], mode: SpliceMode) -> Result<Vec<InstrId>, IrError> {
        let anchor_insn = self.instr(anchor).ok_or(IrError::UnknownInstruction(anchor))?.clone();
        if seq.is_empty() {
            return Err(IrError::BadSequence("empty sequence".into()));
        }
        let tail_ft = match mode {
            SpliceMode::Before => Some(anchor),
            SpliceMode::Replace => anchor_insn.fallthrough,
        };
        for (k, item) in seq.iter().enumerate() {
            let op = item.payload.op;
            match item.target {
                Target::None if op.is_direct_branch() => {
                    return Err(IrError::BadSequence(format!("item {k}: branch without target")))
                }
                Target::None => {}
                _ if !op.is_direct_branch() => {
                    return Err(IrError::BadSequence(format!("item {k}: target on non-branch")))
                }
                Target::Anchor if mode == SpliceMode::Replace => {
                    return Err(IrError::BadSequence(format!("item {k}: targets the replaced anchor")))
                }
                Target::Anchor => {}
                Target::Existing(t) if !self.parts.instructions.contains_key(&t) || (t == anchor && mode == SpliceMode::Replace) => {
                    return Err(IrError::UnknownInstruction(t))
                }
                Target::Existing(_) => {}
                Target::Local(i) if i >= seq.len() => {
                    return Err(IrError::BadSequence(format!("item {k}: local target {i} out of range")))
                }
                Target::Local(_) => {}
            }
            if let Some(g) = item.global_ref {
                if self.data_object(g.object).is_none() {
                    return Err(IrError::UnknownData(g.object));
                }
            }
        }
        let last = seq.last().unwrap();
        if last.payload.op.falls_through() && tail_ft.is_none() {
            return Err(IrError::BadSequence("sequence falls through past a terminator".into()));
        }

        let ids: Vec<InstrId> = (0..seq.len())
            .map(|k| InstrId(self.next_instr + k as u32))
            .collect();
        self.next_instr += seq.len() as u32;
        let head = ids[0];

        // redirect every reference to the anchor
        for insn in self.parts.instructions.values_mut() {
            if insn.fallthrough == Some(anchor) {
                insn.fallthrough = Some(head);
            }
            if insn.target == Some(anchor) {
                insn.target = Some(head);
            }
        }
        for obj in &mut self.parts.data {
            if let IrDataKind::JumpTable(entries) = &mut obj.kind {
                for e in entries.iter_mut().filter(|e| **e == anchor) {
                    *e = head;
                }
            }
        }
        if self.parts.entry == Some(anchor) {
            self.parts.entry = Some(head);
        }
        if let Some(p) = self.parts.pins.remove(&anchor) {
            self.parts.pins.insert(head, p);
        }

        for (k, item) in seq.iter().enumerate() {
            let op = item.payload.op;
            let fallthrough = if !op.falls_through() {
                None
            } else if k + 1 < seq.len() {
                Some(ids[k + 1])
            } else {
                tail_ft
            };
            let target = match item.target {
                Target::None => None,
                Target::Anchor => Some(anchor),
                Target::Existing(t) => Some(t),
                Target::Local(i) => Some(ids[i]),
            };
            self.parts.instructions.insert(
                ids[k],
                IrInstruction {
                    id: ids[k],
                    payload: item.payload.canonical(),
                    original_offset: None,
                    fallthrough,
                    target,
                    indirect: op.is_indirect(),
                    global_ref: item.global_ref,
                    ambiguous_global: false,
                },
            );
        }

        if let Some(block) = self.parts.blocks.iter_mut().find(|b| b.members.contains(&anchor)) {
            let pos = block.members.iter().position(|m| *m == anchor).unwrap();
            let remove = usize::from(mode == SpliceMode::Replace);
            block.members.splice(pos..pos + remove, ids.iter().copied());
        }
        if mode == SpliceMode::Replace {
            self.parts.instructions.remove(&anchor);
        }
        self.normalize_blocks();
        self.touch();
        Ok(ids)
    }

    /// Deletes an instruction, redirecting references to its fallthrough.
    pub fn delete(&mut self, id: InstrId) -> Result<(), IrError> {
        let insn = self.instr(id).ok_or(IrError::UnknownInstruction(id))?.clone();
        let referenced = self.parts.entry == Some(id)
            || self.parts.pins.contains_key(&id)
            || self.parts.data.iter().any(|d| d.entries().contains(&id))
            || self
                .instructions()
                .any(|i| i.id != id && (i.fallthrough == Some(id) || i.target == Some(id)));
        let replacement = insn.fallthrough.filter(|ft| *ft != id);
        if referenced && replacement.is_none() {
            return Err(IrError::StillReferenced(id));
        }
        // a pinned instruction cannot silently hand its pin to a neighbour
        if self.parts.pins.contains_key(&id) {
            return Err(IrError::StillReferenced(id));
        }
        if let Some(next) = replacement {
            for other in self.parts.instructions.values_mut() {
                if other.fallthrough == Some(id) {
                    other.fallthrough = Some(next);
                }
                if other.target == Some(id) {
                    other.target = Some(next);
                }
            }
            for obj in &mut self.parts.data {
                if let IrDataKind::JumpTable(entries) = &mut obj.kind {
                    for e in entries.iter_mut().filter(|e| **e == id) {
                        *e = next;
                    }
                }
            }
            if self.parts.entry == Some(id) {
                self.parts.entry = Some(next);
            }
        }
        self.parts.instructions.remove(&id);
        for b in &mut self.parts.blocks {
            b.members.retain(|m| *m != id);
        }
        self.normalize_blocks();
        self.touch();
        Ok(())
    }

    pub(crate) fn leaders(&self) -> BTreeSet<InstrId> {
        let mut leaders = BTreeSet::new();
        leaders.extend(self.parts.entry);
        leaders.extend(self.parts.pins.keys().copied());
        leaders.extend(self.indirect_targets());
        for insn in self.instructions() {
            leaders.extend(insn.target);
            if insn.op().ends_block() {
                leaders.extend(insn.fallthrough);
            }
        }
        leaders
    }

    /// Splits blocks at leaders and after block-ending instructions, drops
    /// empty blocks, renumbers ranks densely (split-off pieces directly after
    /// their parent) and recomputes successor lists.
    pub(crate) fn normalize_blocks(&mut self) {
        let leaders = self.leaders();
        let mut by_rank: Vec<BasicBlock> = std::mem::take(&mut self.parts.blocks);
        by_rank.sort_by_key(|b| (b.layout_rank, b.id));
        let mut out: Vec<BasicBlock> = Vec::with_capacity(by_rank.len());
        for block in by_rank {
            let mut pieces: Vec<Vec<InstrId>> = Vec::new();
            let mut current: Vec<InstrId> = Vec::new();
            for &m in &block.members {
                if !current.is_empty() && leaders.contains(&m) {
                    pieces.push(std::mem::take(&mut current));
                }
                current.push(m);
                let ends = self.parts.instructions.get(&m).is_some_and(|i| i.op().ends_block());
                if ends {
                    pieces.push(std::mem::take(&mut current));
                }
            }
            if !current.is_empty() {
                pieces.push(current);
            }
            for (k, members) in pieces.into_iter().enumerate() {
                let id = if k == 0 {
                    block.id
                } else {
                    self.next_block += 1;
                    BlockId(self.next_block - 1)
                };
                out.push(BasicBlock { id, members, successors: Vec::new(), layout_rank: 0 });
            }
        }
        for (rank, b) in out.iter_mut().enumerate() {
            b.layout_rank = rank as u32;
        }
        self.parts.blocks = out;
        self.recompute_successors();
    }

    pub(crate) fn recompute_successors(&mut self) {
        let succs = self.block_successors();
        for b in &mut self.parts.blocks {
            b.successors = succs.get(&b.id).cloned().unwrap_or_default();
        }
    }

    /// Block successor lists derived from the instruction-level CFG.
    pub(crate) fn block_successors(&self) -> BTreeMap<BlockId, Vec<BlockId>> {
        let mut owner: BTreeMap<InstrId, BlockId> = BTreeMap::new();
        for b in &self.parts.blocks {
            if let Some(&first) = b.members.first() {
                owner.insert(first, b.id);
            }
        }
        let indirect = self.indirect_targets();
        let returns = self.return_sites();
        self.parts
            .blocks
            .iter()
            .map(|b| {
                let succ = b
                    .members
                    .last()
                    .and_then(|l| self.parts.instructions.get(l))
                    .map(|last| {
                        let mut s: Vec<BlockId> = instr_successors(last, &indirect, &returns)
                            .into_iter()
                            .filter_map(|i| owner.get(&i).copied())
                            .collect();
                        s.sort();
                        s.dedup();
                        s
                    })
                    .unwrap_or_default();
                (b.id, succ)
            })
            .collect()
    }

    pub fn dump(&self) -> String {
        dump::dump(self)
    }
}

pub(crate) fn instr_successors(
    insn: &IrInstruction,
    indirect: &BTreeSet<InstrId>,
    returns: &BTreeSet<InstrId>,
) -> Vec<InstrId> {
    let mut out: Vec<InstrId> = match insn.op() {
        Opcode::Jmp | Opcode::Call => insn.target.into_iter().collect(),
        Opcode::Beq | Opcode::Blt => insn.target.into_iter().chain(insn.fallthrough).collect(),
        Opcode::Jmpi | Opcode::Calli => indirect.iter().copied().collect(),
        Opcode::Ret => returns.iter().copied().collect(),
        Opcode::Halt | Opcode::Trap => Vec::new(),
        _ => insn.fallthrough.into_iter().collect(),
    };
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{assemble, Reg};
    use crate::lifter::lift;

    fn lifted(src: &str) -> ProgramIR {
        lift(&assemble(src).unwrap()).unwrap()
    }

    #[test]
    fn insert_invalidates_and_reanalyze_restores() {
        let ir = lifted("movi r0, 1\nout r0\nhalt").reanalyze(Analysis::ALL).unwrap();
        assert!(ir.is_valid(Analysis::Liveness));
        let mut ir2 = ir.clone();
        ir2.insert_before(InstrId(1), Instruction::movi(Reg::r(2), 3)).unwrap();
        assert!(!ir2.is_valid(Analysis::Liveness));
        assert!(!ir2.is_valid(Analysis::Cfg));
        let ir2 = ir2.reanalyze(&[Analysis::Liveness]).unwrap();
        assert!(ir2.is_valid(Analysis::Liveness));
        assert!(!ir2.is_valid(Analysis::Cfg), "unselected analysis left alone");
        assert!(validate(&ir2).is_clean());
    }

    #[test]
    fn reanalyze_unmodified_is_identical() {
        let ir = lifted("in r0\nbeq r0, r1, x\nout r0\nx: halt").reanalyze(Analysis::ALL).unwrap();
        let again = ir.clone().reanalyze(Analysis::ALL).unwrap();
        assert_eq!(
            serde_json::to_vec(ir.analyses()).unwrap(),
            serde_json::to_vec(again.analyses()).unwrap()
        );
    }

    #[test]
    fn splice_redirects_references_and_splits_blocks() {
        let mut ir = lifted("top: in r0\nbeq r0, r1, top\nhalt");
        let ids = ir
            .splice(
                InstrId(0),
                &[
                    NewInstr::plain(Instruction::movi(Reg::r(1), 0)),
                    NewInstr::branch(Instruction::cond(Opcode::Beq, Reg::r(1), Reg::r(1), 0), Target::Anchor),
                    NewInstr::plain(Instruction::nullary(Opcode::Trap)),
                ],
                SpliceMode::Before,
            )
            .unwrap();
        assert_eq!(ir.entry(), ids[0]);
        assert_eq!(ir.instr(InstrId(1)).unwrap().target, Some(ids[0]));
        assert!(validate(&ir).is_clean(), "{}", validate(&ir));
        assert_eq!(ir.instr(ids[2]).unwrap().fallthrough, None);
        assert!(ir.blocks().len() >= 3);
    }

    #[test]
    fn delete_refuses_to_dangle() {
        let mut ir = lifted(".jumptable T: a\nmovi r1, @T\nload r0, r1, 0\njmpi r0\na: halt");
        assert_eq!(ir.delete(InstrId(3)), Err(IrError::StillReferenced(InstrId(3))));
        ir.delete(InstrId(0)).unwrap();
        assert_eq!(ir.entry(), InstrId(1));
        assert!(validate(&ir).is_clean());
    }

    #[test]
    fn layout_order_must_be_permutation() {
        let mut ir = lifted("in r0\nbeq r0, r1, x\nout r0\nx: halt");
        let ids: Vec<BlockId> = ir.blocks().iter().map(|b| b.id).collect();
        assert!(ir.set_layout_order(&ids[1..]).is_err());
        let mut rev = ids.clone();
        rev.reverse();
        ir.set_layout_order(&rev).unwrap();
        assert_eq!(ir.layout_order()[0].id, *ids.last().unwrap());
    }

    #[test]
    fn set_payload_keeps_control_shape() {
        let mut ir = lifted("enter 2\nleave 2\nhalt");
        ir.set_payload(InstrId(0), Instruction::imm_only(Opcode::Enter, 5)).unwrap();
        assert_eq!(ir.instr(InstrId(0)).unwrap().payload.imm, 5);
        assert_eq!(
            ir.set_payload(InstrId(0), Instruction::nullary(Opcode::Halt)),
            Err(IrError::ControlShapeChange(InstrId(0)))
        );
    }
}
