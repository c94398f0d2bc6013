//! Reference interpreter. Its results are the equivalence oracle for every
//! rewrite: two images are functionally equivalent on an input iff their
//! output words and termination agree.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Opcode, ProgramImage, HEAP_BASE, RECORD_SIZE, STACK_TOP};

pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Indirect transfer or return to something that is not a code offset.
    BadTarget,
    InputExhausted,
    /// Execution ran past the last record.
    PcOutOfRange,
    /// `alloc` with a negative size or beyond the heap region.
    BadAlloc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Halt,
    Trap,
    StepLimit,
    Fault(Fault),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub output: Vec<i64>,
    pub steps: u64,
    pub termination: Termination,
}

impl ExecutionResult {
    /// Equality on the observable behaviour; step counts may differ.
    pub fn same_behaviour(&self, other: &ExecutionResult) -> bool {
        self.output == other.output && self.termination == other.termination
    }
}

const HEAP_LIMIT_WORDS: i64 = (STACK_TOP - HEAP_BASE) / 2;

struct Machine<'a> {
    image: &'a ProgramImage,
    regs: [i64; 9],
    memory: HashMap<i64, i64>,
    heap_top: i64,
}

impl Machine<'_> {
    fn sp(&mut self) -> &mut i64 {
        &mut self.regs[8]
    }

    fn read(&self, addr: i64) -> i64 {
        self.memory.get(&addr).copied().unwrap_or(0)
    }

    fn code_index(&self, byte_offset: i64) -> Option<usize> {
        let len = self.image.code.len() as i64 * RECORD_SIZE as i64;
        (byte_offset >= 0 && byte_offset < len && byte_offset % RECORD_SIZE as i64 == 0)
            .then(|| (byte_offset / RECORD_SIZE as i64) as usize)
    }

    fn direct(&self, imm: i64) -> Option<usize> {
        (imm >= 0 && (imm as usize) < self.image.code.len()).then_some(imm as usize)
    }
}

/// Runs `image` on `input` for at most `step_limit` instructions.
pub fn execute(image: &ProgramImage, input: &[i64], step_limit: u64) -> ExecutionResult {
    let mut m = Machine {
        image,
        regs: [0; 9],
        memory: HashMap::new(),
        heap_top: 0,
    };
    m.regs[8] = STACK_TOP;
    for (obj, base) in image.data.iter().zip(image.global_bases()) {
        for (i, &w) in obj.words.iter().enumerate() {
            if w != 0 {
                m.memory.insert(base + i as i64, w);
            }
        }
    }

    let mut input = input.iter().copied();
    let mut output = Vec::new();
    let mut steps = 0u64;
    let mut pc = image.entry as usize;

    let termination = loop {
        if steps >= step_limit {
            break Termination::StepLimit;
        }
        let Some(insn) = image.code.get(pc).copied() else {
            break Termination::Fault(Fault::PcOutOfRange);
        };
        steps += 1;
        let a = insn.a.index() as usize;
        let b = insn.b.index() as usize;
        let c = insn.c.index() as usize;
        let mut next = pc + 1;
        match insn.op {
            Opcode::Movi => m.regs[a] = insn.imm,
            Opcode::Mov => m.regs[a] = m.regs[b],
            Opcode::Add => m.regs[a] = m.regs[b].wrapping_add(m.regs[c]),
            Opcode::Sub => m.regs[a] = m.regs[b].wrapping_sub(m.regs[c]),
            Opcode::Mul => m.regs[a] = m.regs[b].wrapping_mul(m.regs[c]),
            Opcode::Load => m.regs[a] = m.read(m.regs[b].wrapping_add(insn.imm)),
            Opcode::Store => {
                let addr = m.regs[b].wrapping_add(insn.imm);
                m.memory.insert(addr, m.regs[a]);
            }
            Opcode::Push => {
                let v = m.regs[a];
                *m.sp() = m.regs[8].wrapping_sub(1);
                m.memory.insert(m.regs[8], v);
            }
            Opcode::Pop => {
                let v = m.read(m.regs[8]);
                *m.sp() = m.regs[8].wrapping_add(1);
                m.regs[a] = v;
            }
            Opcode::Enter => *m.sp() = m.regs[8].wrapping_sub(insn.imm),
            Opcode::Leave => *m.sp() = m.regs[8].wrapping_add(insn.imm),
            Opcode::Alloc => {
                let size = m.regs[b];
                match m.heap_top.checked_add(size) {
                    Some(top) if size >= 0 && top <= HEAP_LIMIT_WORDS => {
                        m.regs[a] = HEAP_BASE + m.heap_top;
                        m.heap_top = top;
                    }
                    _ => break Termination::Fault(Fault::BadAlloc),
                }
            }
            Opcode::Jmp => match m.direct(insn.imm) {
                Some(t) => next = t,
                None => break Termination::Fault(Fault::BadTarget),
            },
            Opcode::Beq | Opcode::Blt => {
                let taken = if insn.op == Opcode::Beq {
                    m.regs[a] == m.regs[b]
                } else {
                    m.regs[a] < m.regs[b]
                };
                if taken {
                    match m.direct(insn.imm) {
                        Some(t) => next = t,
                        None => break Termination::Fault(Fault::BadTarget),
                    }
                }
            }
            Opcode::Jmpi => match m.code_index(m.regs[a]) {
                Some(t) => next = t,
                None => break Termination::Fault(Fault::BadTarget),
            },
            Opcode::Call | Opcode::Calli => {
                let target = if insn.op == Opcode::Call {
                    m.direct(insn.imm)
                } else {
                    m.code_index(m.regs[a])
                };
                let Some(t) = target else {
                    break Termination::Fault(Fault::BadTarget);
                };
                let ret = (pc as i64 + 1) * RECORD_SIZE as i64;
                *m.sp() = m.regs[8].wrapping_sub(1);
                m.memory.insert(m.regs[8], ret);
                next = t;
            }
            Opcode::Ret => {
                let ret = m.read(m.regs[8]);
                *m.sp() = m.regs[8].wrapping_add(1);
                match m.code_index(ret) {
                    Some(t) => next = t,
                    None => break Termination::Fault(Fault::BadTarget),
                }
            }
            Opcode::In => match input.next() {
                Some(w) => m.regs[a] = w,
                None => break Termination::Fault(Fault::InputExhausted),
            },
            Opcode::Out => output.push(m.regs[a]),
            Opcode::Halt => break Termination::Halt,
            Opcode::Trap => break Termination::Trap,
        }
        pc = next;
    };

    ExecutionResult { output, steps, termination }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    fn run(src: &str, input: &[i64]) -> ExecutionResult {
        execute(&assemble(src).unwrap(), input, DEFAULT_STEP_LIMIT)
    }

    #[test]
    fn movi_out_halt() {
        let r = run("movi r0, 7\nout r0\nhalt\n", &[]);
        assert_eq!(r.output, vec![7]);
        assert_eq!(r.termination, Termination::Halt);
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn identity_on_input() {
        let r = run("in r0\nout r0\nhalt\n", &[42]);
        assert_eq!(r.output, vec![42]);
    }

    #[test]
    fn sum_of_inputs_with_blt() {
        // reads five words and outputs their sum
        let src = "
            movi r1, 0      ; i
            movi r2, 5      ; n
            movi r3, 0      ; acc
            movi r4, 1
        loop:
            in r0
            add r3, r3, r0
            add r1, r1, r4
            blt r1, r2, loop
            out r3
            halt
        ";
        let r = run(src, &[1, 2, 3, 4, 5]);
        // 1+2+3+4+5
        assert_eq!(r.output, vec![15]);
        assert_eq!(r.termination, Termination::Halt);
    }

    #[test]
    fn input_exhaustion_is_a_fault() {
        let r = run("in r0\nhalt\n", &[]);
        assert_eq!(r.termination, Termination::Fault(Fault::InputExhausted));
    }

    #[test]
    fn jmpi_outside_code_faults() {
        let r = run("movi r0, 160\njmpi r0\n", &[]);
        assert_eq!(r.termination, Termination::Fault(Fault::BadTarget));
        let r = run("movi r0, 8\njmpi r0\nhalt\n", &[]);
        assert_eq!(r.termination, Termination::Fault(Fault::BadTarget));
    }

    #[test]
    fn unwritten_memory_reads_zero_and_step_limit_stops() {
        let r = run("movi r1, 12345\nload r0, r1, 0\nout r0\nhalt\n", &[]);
        assert_eq!(r.output, vec![0]);
        let r = execute(&assemble("top: jmp top\n").unwrap(), &[], 100);
        assert_eq!(r.termination, Termination::StepLimit);
        assert_eq!(r.steps, 100);
    }

    #[test]
    fn call_ret_and_frames() {
        let src = "
            movi r0, 5
            push r0
            call double
            pop r1
            out r0
            halt
        double:
            enter 2
            load r2, sp, 3      ; argument above return address
            store r2, sp, 0
            load r3, sp, 0
            add r0, r3, r3
            leave 2
            ret
        ";
        let r = run(src, &[]);
        assert_eq!(r.output, vec![10]);
        assert_eq!(r.termination, Termination::Halt);
    }

    #[test]
    fn globals_and_heap_are_disjoint() {
        let src = "
            .global G, 2, 11, 22
            movi r1, @G
            load r0, r1, 1
            out r0
            movi r2, 4
            alloc r3, r2
            store r2, r3, 0
            load r4, r3, 0
            out r4
            halt
        ";
        let r = run(src, &[]);
        assert_eq!(r.output, vec![22, 4]);
    }

    #[test]
    fn determinism() {
        let img = assemble("in r0\nin r1\nmul r2, r0, r1\nout r2\nhalt\n").unwrap();
        assert_eq!(execute(&img, &[6, 7], 10), execute(&img, &[6, 7], 10));
    }
}
