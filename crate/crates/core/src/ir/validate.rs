use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BlockId, InstrId, ProgramIR};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    /// The offending element, e.g. `i12`, `b3`, `d0` or `ir`.
    pub subject: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, subject: impl fmt::Display, message: impl Into<String>) {
        self.violations.push(Violation { subject: subject.to_string(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.subject, v.message)?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of the IR and reports each violation.
/// Never panics, whatever the IR contains.
pub fn validate(ir: &ProgramIR) -> ValidationReport {
    let p = ir.parts();
    let mut r = ValidationReport::default();
    let exists = |id: &InstrId| p.instructions.contains_key(id);
    let mut dangling = false;

    match p.entry {
        None => r.push("ir", "no entry"),
        Some(e) if !exists(&e) => {
            dangling = true;
            r.push("ir", "entry references missing instruction")
        }
        Some(_) => {}
    }

    let data_ids: BTreeSet<_> = p.data.iter().map(|d| d.id).collect();
    if data_ids.len() != p.data.len() {
        r.push("ir", "duplicate data object id");
    }
    for obj in &p.data {
        for e in obj.entries() {
            if !exists(e) {
                dangling = true;
                r.push(obj.id, "dangling jumptable entry");
            }
        }
    }

    for (key, insn) in &p.instructions {
        let op = insn.payload.op;
        if *key != insn.id {
            r.push(key, format!("keyed under {key} but has id {}", insn.id));
        }
        if !insn.payload.is_canonical() {
            r.push(insn.id, "payload not canonical");
        }
        match (op.falls_through(), insn.fallthrough) {
            (true, None) => r.push(insn.id, "missing fallthrough"),
            (false, Some(_)) => r.push(insn.id, "fallthrough on non-falling instruction"),
            (_, Some(ft)) if !exists(&ft) => {
                dangling = true;
                r.push(insn.id, "dangling fallthrough")
            }
            _ => {}
        }
        match (op.is_direct_branch(), insn.target) {
            (true, None) => r.push(insn.id, "branch without target"),
            (false, Some(_)) => r.push(insn.id, "non-branch instruction has branch targets"),
            (_, Some(t)) if !exists(&t) => {
                dangling = true;
                r.push(insn.id, "dangling branch target")
            }
            _ => {}
        }
        if insn.indirect != op.is_indirect() {
            r.push(insn.id, "indirect flag disagrees with opcode");
        }
        if let Some(g) = insn.global_ref {
            match ir.data_object(g.object) {
                None => r.push(insn.id, "global reference to missing object"),
                Some(obj) if g.offset < 0 || g.offset > obj.len() as i64 => {
                    r.push(insn.id, "global reference offset out of bounds")
                }
                Some(_) => {}
            }
        }
    }

    for id in p.pins.keys() {
        if !exists(id) {
            dangling = true;
            r.push(id, "pin on missing instruction");
        }
    }

    // block structure
    let mut owner: BTreeMap<InstrId, BlockId> = BTreeMap::new();
    let block_ids: BTreeSet<BlockId> = p.blocks.iter().map(|b| b.id).collect();
    if block_ids.len() != p.blocks.len() {
        r.push("ir", "duplicate block id");
    }
    for b in &p.blocks {
        if b.members.is_empty() {
            r.push(b.id, "empty block");
        }
        for m in &b.members {
            if !exists(m) {
                dangling = true;
                r.push(b.id, format!("member {m} does not exist"));
            } else if let Some(prev) = owner.insert(*m, b.id) {
                r.push(m, format!("instruction in blocks {prev} and {}", b.id));
            }
        }
    }
    for id in p.instructions.keys() {
        if !owner.contains_key(id) {
            r.push(id, "instruction in no block");
        }
    }

    let leaders = if dangling { BTreeSet::new() } else { ir.leaders() };
    for b in &p.blocks {
        for (k, pair) in b.members.windows(2).enumerate() {
            let (Some(cur), Some(_)) = (p.instructions.get(&pair[0]), p.instructions.get(&pair[1])) else {
                continue;
            };
            if cur.payload.op.ends_block() {
                r.push(b.id, format!("control transfer {} inside block", cur.id));
            } else if cur.fallthrough != Some(pair[1]) {
                r.push(b.id, format!("broken fallthrough chain at position {k}"));
            }
            if leaders.contains(&pair[1]) {
                r.push(b.id, format!("leader {} not at block start", pair[1]));
            }
        }
        if let Some(last) = b.members.last().and_then(|l| p.instructions.get(l)) {
            if let Some(ft) = last.fallthrough {
                if !last.payload.op.ends_block() && owner.contains_key(&ft) && !leaders.contains(&ft) && !dangling {
                    // a block may end early only where a leader begins
                    let starts_block = p.blocks.iter().any(|o| o.members.first() == Some(&ft));
                    if !starts_block {
                        r.push(b.id, "falls into the middle of another block");
                    }
                }
            }
        }
    }

    let mut ranks: Vec<u32> = p.blocks.iter().map(|b| b.layout_rank).collect();
    ranks.sort_unstable();
    if ranks.iter().enumerate().any(|(k, &rank)| rank != k as u32) {
        r.push("ir", "layout_rank not a permutation");
    }

    if !dangling && r.is_clean() {
        let expected = ir.block_successors();
        for b in &p.blocks {
            if expected.get(&b.id) != Some(&b.successors) {
                r.push(b.id, "stale successor list");
            }
        }
    }
    r
}
