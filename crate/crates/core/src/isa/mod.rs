//! The desk instruction set.
//!
//! Nine 64-bit registers (`r0`..`r7` plus the stack pointer `sp` at index 8),
//! fixed 16-byte instruction records and absolute branch targets in
//! instruction units. Runtime code addresses (jump table words, `jmpi` /
//! `calli` operands and return addresses) are byte offsets into the code
//! section, so each one is a multiple of [`RECORD_SIZE`].

mod asm;
mod disasm;
mod exec;
mod image;

pub use asm::{assemble, name_hash, AsmError};
pub use disasm::disassemble;
pub use exec::{execute, ExecutionResult, Fault, Termination, DEFAULT_STEP_LIMIT};
pub use image::{DataKind, DataObject, DecodeError, Pin, ProgramImage, FORMAT_VERSION, MAGIC};
pub(crate) use image::global_bases;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Size of one encoded instruction record in bytes.
pub const RECORD_SIZE: u64 = 16;

/// First word address of the global data region. Objects are packed in table
/// order, each followed by a one-word gap.
pub const GLOBAL_BASE: i64 = 0x1000_0000;
/// First word address of the heap region grown by `alloc`.
pub const HEAP_BASE: i64 = 0x4000_0000;
/// Initial stack pointer; the stack grows downward from here.
pub const STACK_TOP: i64 = 0x7000_0000;

/// A register index. `Reg::SP` is register 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    /// Number of general-purpose registers (`r0`..`r7`).
    pub const GENERAL: u8 = 8;
    pub const SP: Reg = Reg(8);

    pub fn new(index: u8) -> Option<Reg> {
        (index <= 8).then_some(Reg(index))
    }

    /// Panics on an index above 8; for building instructions in code.
    pub const fn r(index: u8) -> Reg {
        assert!(index <= 8, "register index out of range");
        Reg(index)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_sp(self) -> bool {
        self.0 == 8
    }

    /// All general-purpose registers in index order.
    pub fn general() -> impl Iterator<Item = Reg> {
        (0..Self::GENERAL).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_sp() {
            f.write_str("sp")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

macro_rules! opcodes {
    ($($name:ident = $byte:literal => $mnemonic:literal),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum Opcode {
            $($name = $byte),*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name),*];

            pub fn from_byte(byte: u8) -> Option<Opcode> {
                match byte {
                    $($byte => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mnemonic),*
                }
            }

            pub fn from_mnemonic(text: &str) -> Option<Opcode> {
                match text {
                    $($mnemonic => Some(Opcode::$name),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    Movi = 0x01 => "movi",
    Mov = 0x02 => "mov",
    Add = 0x03 => "add",
    Sub = 0x04 => "sub",
    Mul = 0x05 => "mul",
    Load = 0x06 => "load",
    Store = 0x07 => "store",
    Push = 0x08 => "push",
    Pop = 0x09 => "pop",
    Enter = 0x0a => "enter",
    Leave = 0x0b => "leave",
    Alloc = 0x0c => "alloc",
    Jmp = 0x0d => "jmp",
    Beq = 0x0e => "beq",
    Blt = 0x0f => "blt",
    Jmpi = 0x10 => "jmpi",
    Call = 0x11 => "call",
    Calli = 0x12 => "calli",
    Ret = 0x13 => "ret",
    In = 0x14 => "in",
    Out = 0x15 => "out",
    Halt = 0x16 => "halt",
    Trap = 0x17 => "trap",
}

/// Which instruction fields an opcode uses. Unused fields are zero in the
/// canonical encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operands {
    None,
    A,
    AB,
    ABC,
    AImm,
    ABImm,
    Imm,
}

impl Opcode {
    pub fn operands(self) -> Operands {
        use Opcode::*;
        match self {
            Movi => Operands::AImm,
            Mov | Alloc => Operands::AB,
            Add | Sub | Mul => Operands::ABC,
            Load | Store | Beq | Blt => Operands::ABImm,
            Push | Pop | Jmpi | Calli | In | Out => Operands::A,
            Enter | Leave | Jmp | Call => Operands::Imm,
            Ret | Halt | Trap => Operands::None,
        }
    }

    /// Opcodes whose immediate is a direct branch target.
    pub fn is_direct_branch(self) -> bool {
        matches!(self, Opcode::Jmp | Opcode::Beq | Opcode::Blt | Opcode::Call)
    }

    pub fn is_indirect(self) -> bool {
        matches!(self, Opcode::Jmpi | Opcode::Calli)
    }

    /// True if execution can continue at the next record.
    pub fn falls_through(self) -> bool {
        !matches!(
            self,
            Opcode::Jmp | Opcode::Jmpi | Opcode::Ret | Opcode::Halt | Opcode::Trap
        )
    }

    /// True if the opcode transfers control anywhere other than the next
    /// record; such an instruction always ends a basic block.
    pub fn ends_block(self) -> bool {
        self.is_direct_branch() || self.is_indirect() || !self.falls_through()
    }
}

/// One decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Opcode,
    pub a: Reg,
    pub b: Reg,
    pub c: Reg,
    pub imm: i64,
}

impl Instruction {
    const ZERO: Reg = Reg(0);

    fn with(op: Opcode, a: Reg, b: Reg, c: Reg, imm: i64) -> Self {
        Instruction { op, a, b, c, imm }
    }

    pub fn nullary(op: Opcode) -> Self {
        Self::with(op, Self::ZERO, Self::ZERO, Self::ZERO, 0)
    }
    pub fn unary(op: Opcode, a: Reg) -> Self {
        Self::with(op, a, Self::ZERO, Self::ZERO, 0)
    }
    pub fn imm_only(op: Opcode, imm: i64) -> Self {
        Self::with(op, Self::ZERO, Self::ZERO, Self::ZERO, imm)
    }
    pub fn movi(a: Reg, imm: i64) -> Self {
        Self::with(Opcode::Movi, a, Self::ZERO, Self::ZERO, imm)
    }
    pub fn mov(a: Reg, b: Reg) -> Self {
        Self::with(Opcode::Mov, a, b, Self::ZERO, 0)
    }
    pub fn arith(op: Opcode, a: Reg, b: Reg, c: Reg) -> Self {
        Self::with(op, a, b, c, 0)
    }
    pub fn load(a: Reg, base: Reg, disp: i64) -> Self {
        Self::with(Opcode::Load, a, base, Self::ZERO, disp)
    }
    pub fn store(a: Reg, base: Reg, disp: i64) -> Self {
        Self::with(Opcode::Store, a, base, Self::ZERO, disp)
    }
    pub fn alloc(a: Reg, size: Reg) -> Self {
        Self::with(Opcode::Alloc, a, size, Self::ZERO, 0)
    }
    pub fn cond(op: Opcode, a: Reg, b: Reg, target: i64) -> Self {
        Self::with(op, a, b, Self::ZERO, target)
    }

    /// Returns the instruction with every field the opcode ignores cleared.
    pub fn canonical(self) -> Self {
        let z = Self::ZERO;
        match self.op.operands() {
            Operands::None => Self::with(self.op, z, z, z, 0),
            Operands::A => Self::with(self.op, self.a, z, z, 0),
            Operands::AB => Self::with(self.op, self.a, self.b, z, 0),
            Operands::ABC => Self::with(self.op, self.a, self.b, self.c, 0),
            Operands::AImm => Self::with(self.op, self.a, z, z, self.imm),
            Operands::ABImm => Self::with(self.op, self.a, self.b, z, self.imm),
            Operands::Imm => Self::with(self.op, z, z, z, self.imm),
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonical()
    }

    /// Register read by the instruction, excluding implicit `sp` uses.
    pub fn uses(&self) -> RegSet {
        use Opcode::*;
        let mut set = RegSet::EMPTY;
        match self.op {
            Mov | Alloc => set.insert(self.b),
            Add | Sub | Mul => {
                set.insert(self.b);
                set.insert(self.c);
            }
            Load => set.insert(self.b),
            Store | Beq | Blt => {
                set.insert(self.a);
                set.insert(self.b);
            }
            Push | Jmpi | Calli | Out => set.insert(self.a),
            _ => {}
        }
        set
    }

    /// Registers written by the instruction, excluding implicit `sp` updates.
    pub fn defs(&self) -> RegSet {
        use Opcode::*;
        let mut set = RegSet::EMPTY;
        if matches!(self.op, Movi | Mov | Add | Sub | Mul | Load | Pop | Alloc | In) {
            set.insert(self.a);
        }
        set
    }

    /// True if the instruction reads or writes memory relative to `sp`
    /// through its displacement.
    pub fn is_sp_relative(&self) -> bool {
        matches!(self.op, Opcode::Load | Opcode::Store) && self.b.is_sp()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op.mnemonic();
        match self.op.operands() {
            Operands::None => write!(f, "{m}"),
            Operands::A => write!(f, "{m} {}", self.a),
            Operands::AB => write!(f, "{m} {}, {}", self.a, self.b),
            Operands::ABC => write!(f, "{m} {}, {}, {}", self.a, self.b, self.c),
            Operands::AImm => write!(f, "{m} {}, {}", self.a, self.imm),
            Operands::ABImm => write!(f, "{m} {}, {}, {}", self.a, self.b, self.imm),
            Operands::Imm => write!(f, "{m} {}", self.imm),
        }
    }
}

/// A set of general-purpose registers (`sp` is never a member).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegSet(u8);

impl RegSet {
    pub const EMPTY: RegSet = RegSet(0);
    pub const ALL: RegSet = RegSet(0xff);

    pub fn insert(&mut self, reg: Reg) {
        if !reg.is_sp() {
            self.0 |= 1 << reg.index();
        }
    }

    pub fn remove(&mut self, reg: Reg) {
        if !reg.is_sp() {
            self.0 &= !(1 << reg.index());
        }
    }

    pub fn contains(&self, reg: Reg) -> bool {
        !reg.is_sp() && self.0 & (1 << reg.index()) != 0
    }

    pub fn union(self, other: RegSet) -> RegSet {
        RegSet(self.0 | other.0)
    }

    pub fn minus(self, other: RegSet) -> RegSet {
        RegSet(self.0 & !other.0)
    }

    pub fn complement(self) -> RegSet {
        RegSet(!self.0)
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Reg> {
        Reg::general().filter(move |r| self.contains(*r))
    }

    pub fn bits(&self) -> u8 {
        self.0
    }
}

impl FromIterator<Reg> for RegSet {
    fn from_iter<I: IntoIterator<Item = Reg>>(iter: I) -> Self {
        let mut set = RegSet::EMPTY;
        for r in iter {
            set.insert(r);
        }
        set
    }
}

impl fmt::Display for RegSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, r) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}")?;
        }
        f.write_str("}")
    }
}
