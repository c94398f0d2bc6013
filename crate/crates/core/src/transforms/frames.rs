//! Stack frame recovery: which `enter` is active at each instruction, how
//! many words have been pushed since, and which `leave` closes each frame.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::ir::{InstrId, ProgramIR};
use crate::isa::Opcode;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("irregular frame at {at}: {reason}")]
pub struct FrameError {
    pub at: InstrId,
    pub reason: String,
}

/// One `sp`-relative access inside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameAccess {
    pub instr: InstrId,
    /// Words pushed since the `enter` when the access executes.
    pub depth: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub enter: InstrId,
    /// Local words reserved by the `enter`.
    pub size: i64,
    pub leaves: Vec<InstrId>,
    pub accesses: Vec<FrameAccess>,
}

impl Frame {
    /// Accesses at or above the frame's top (return address, caller
    /// arguments) given their depth.
    pub fn above_locals(&self, access: &FrameAccess, disp: i64) -> bool {
        disp >= access.depth + self.size
    }
}

/// Frames keyed by their `enter`.
pub type FrameMap = BTreeMap<InstrId, Frame>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct State {
    frame: Option<InstrId>,
    depth: i64,
}

const OUTSIDE: State = State { frame: None, depth: 0 };

/// Propagates frame state along intraprocedural edges (`call` continues at
/// its return site) from the entry and every `call` target, then from jump
/// table entries if the program has any `calli`.
pub fn analyze_frames(ir: &ProgramIR) -> Result<FrameMap, FrameError> {
    let indirect = ir.indirect_targets();
    let mut state: BTreeMap<InstrId, State> = BTreeMap::new();
    let mut roots = vec![ir.entry()];
    roots.extend(ir.instructions().filter(|i| i.op() == Opcode::Call).filter_map(|i| i.target));
    propagate(ir, &mut state, &roots, &indirect)?;
    if ir.instructions().any(|i| i.op() == Opcode::Calli) {
        let extra: Vec<InstrId> = indirect.iter().copied().filter(|t| !state.contains_key(t)).collect();
        propagate(ir, &mut state, &extra, &indirect)?;
    }

    let mut frames = FrameMap::new();
    for &id in state.keys() {
        let insn = ir.instr(id).expect("visited ids exist");
        if insn.op() == Opcode::Enter {
            frames.insert(id, Frame { enter: id, size: insn.payload.imm, leaves: Vec::new(), accesses: Vec::new() });
        }
    }
    for (&id, st) in &state {
        let Some(enter) = st.frame else { continue };
        let insn = ir.instr(id).unwrap();
        let frame = frames.get_mut(&enter).unwrap();
        match insn.op() {
            Opcode::Leave => frame.leaves.push(id),
            _ if insn.payload.is_sp_relative() => frame.accesses.push(FrameAccess { instr: id, depth: st.depth }),
            _ => {}
        }
    }
    Ok(frames)
}

fn propagate(
    ir: &ProgramIR,
    state: &mut BTreeMap<InstrId, State>,
    roots: &[InstrId],
    indirect: &std::collections::BTreeSet<InstrId>,
) -> Result<(), FrameError> {
    let mut queue: VecDeque<(InstrId, State)> = VecDeque::new();
    for &r in roots {
        queue.push_back((r, OUTSIDE));
    }
    let irregular = |at: InstrId, reason: &str| FrameError { at, reason: reason.to_string() };
    while let Some((id, incoming)) = queue.pop_front() {
        match state.get(&id) {
            Some(s) if *s == incoming => continue,
            Some(_) => return Err(irregular(id, "conflicting frame state where paths merge")),
            None => {
                state.insert(id, incoming);
            }
        }
        let insn = ir.instr(id).ok_or_else(|| irregular(id, "missing instruction"))?;
        let mut out = incoming;
        match insn.op() {
            Opcode::Enter => {
                if incoming.frame.is_some() {
                    return Err(irregular(id, "nested enter"));
                }
                out = State { frame: Some(id), depth: 0 };
            }
            Opcode::Leave => {
                let Some(enter) = incoming.frame else {
                    return Err(irregular(id, "leave without enter"));
                };
                if ir.instr(enter).unwrap().payload.imm != insn.payload.imm {
                    return Err(irregular(id, "leave size differs from enter"));
                }
                if incoming.depth != 0 {
                    return Err(irregular(id, "leave with pushed words outstanding"));
                }
                out = OUTSIDE;
            }
            Opcode::Push if incoming.frame.is_some() => out.depth += 1,
            Opcode::Pop if incoming.frame.is_some() => {
                out.depth -= 1;
                if out.depth < 0 {
                    return Err(irregular(id, "pop below frame"));
                }
            }
            Opcode::Ret if incoming.frame.is_some() => return Err(irregular(id, "ret inside frame")),
            _ => {}
        }
        let next: Vec<InstrId> = match insn.op() {
            Opcode::Call | Opcode::Calli => insn.fallthrough.into_iter().collect(),
            Opcode::Jmpi => indirect.iter().copied().collect(),
            Opcode::Ret | Opcode::Halt | Opcode::Trap => Vec::new(),
            _ => insn.branch_targets().chain(insn.fallthrough).collect(),
        };
        for n in next {
            queue.push_back((n, out));
        }
    }
    Ok(())
}
