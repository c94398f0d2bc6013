//! Scratch-register selection for inserted code.

use crate::isa::{Instruction, Opcode, Reg, RegSet};

/// Registers an inserted sequence may clobber. Those in `saved` were live
/// and must be pushed before and popped after the sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Scratch {
    pub regs: Vec<Reg>,
    pub saved: Vec<Reg>,
}

impl Scratch {
    /// Picks `n` registers outside `exclude`, preferring dead ones
    /// (highest index first) and saving live ones only when it must.
    pub fn pick(dead: RegSet, exclude: RegSet, n: usize) -> Scratch {
        let mut regs: Vec<Reg> = dead.minus(exclude).iter().collect();
        regs.reverse();
        regs.truncate(n);
        let mut saved = Vec::new();
        for r in (0..Reg::GENERAL).rev().map(Reg::r) {
            if regs.len() == n {
                break;
            }
            if !exclude.contains(r) && !regs.contains(&r) {
                regs.push(r);
                saved.push(r);
            }
        }
        Scratch { regs, saved }
    }

    pub fn pushes(&self) -> Vec<Instruction> {
        self.saved.iter().map(|&r| Instruction::unary(Opcode::Push, r)).collect()
    }

    pub fn pops(&self) -> Vec<Instruction> {
        self.saved.iter().rev().map(|&r| Instruction::unary(Opcode::Pop, r)).collect()
    }

    pub fn depth(&self) -> i64 {
        self.saved.len() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefers_dead_registers() {
        let dead: RegSet = [Reg::r(2), Reg::r(7)].into_iter().collect();
        let s = Scratch::pick(dead, RegSet::EMPTY, 2);
        assert_eq!(s.regs, vec![Reg::r(7), Reg::r(2)]);
        assert!(s.saved.is_empty());
    }

    #[test]
    fn saves_when_nothing_is_dead() {
        let exclude: RegSet = [Reg::r(7)].into_iter().collect();
        let s = Scratch::pick(RegSet::EMPTY, exclude, 1);
        assert_eq!(s.regs, vec![Reg::r(6)]);
        assert_eq!(s.saved, vec![Reg::r(6)]);
        assert_eq!(s.pops(), vec![Instruction::unary(Opcode::Pop, Reg::r(6))]);
    }
}
