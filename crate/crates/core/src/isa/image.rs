//! The `.disa` binary container.
//!
//! All integers are little-endian:
//!
//! ```text
//! magic      4 bytes  "DISA"
//! version    u16      1
//! entry      u32      instruction offset
//! code_len   u32      number of records
//! code       code_len x 16-byte records:
//!              opcode u8, reg_a u8, reg_b u8, reg_c u8, pad u32 (= 0), imm i64
//! data_len   u32
//! data       data_len x (name_hash u64, kind u8 {0 raw, 1 jumptable},
//!                        length u32, length x i64 words)
//! pin_len    u32
//! pins       pin_len x (instruction offset u32, placement offset u32)
//! ```
//!
//! Trailing bytes are rejected so that decoding and re-encoding is the
//! identity on every accepted input.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Instruction, Opcode, Reg, GLOBAL_BASE, RECORD_SIZE};

pub const MAGIC: [u8; 4] = *b"DISA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Raw,
    JumpTable,
}

impl DataKind {
    fn byte(self) -> u8 {
        match self {
            DataKind::Raw => 0,
            DataKind::JumpTable => 1,
        }
    }
}

/// A static data object. Jump table words are byte offsets into the code.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataObject {
    pub name_hash: u64,
    pub kind: DataKind,
    pub words: Vec<i64>,
}

/// An instruction whose placement in rewritten output is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pin {
    pub instruction: u32,
    pub placement: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgramImage {
    pub entry: u32,
    pub code: Vec<Instruction>,
    pub data: Vec<DataObject>,
    pub pins: Vec<Pin>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated {what} at byte {at}")]
    Truncated { what: &'static str, at: usize },
    #[error("unknown opcode byte 0x{byte:02x} in record {record}")]
    UnknownOpcode { record: usize, byte: u8 },
    #[error("register index {index} out of range in record {record}")]
    BadRegister { record: usize, index: u8 },
    #[error("non-canonical encoding of record {record}")]
    NonCanonical { record: usize },
    #[error("unknown data kind {kind} in object {object}")]
    BadDataKind { object: usize, kind: u8 },
    #[error("{0} trailing bytes after pin table")]
    TrailingBytes(usize),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return Err(DecodeError::Truncated { what, at: self.pos });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_record(record: usize, raw: &[u8]) -> Result<Instruction, DecodeError> {
    let op = Opcode::from_byte(raw[0]).ok_or(DecodeError::UnknownOpcode { record, byte: raw[0] })?;
    let reg = |index: u8| Reg::new(index).ok_or(DecodeError::BadRegister { record, index });
    let (a, b, c) = (reg(raw[1])?, reg(raw[2])?, reg(raw[3])?);
    let pad = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    let imm = i64::from_le_bytes(raw[8..16].try_into().unwrap());
    let insn = Instruction { op, a, b, c, imm };
    if pad != 0 || !insn.is_canonical() {
        return Err(DecodeError::NonCanonical { record });
    }
    Ok(insn)
}

pub(crate) fn encode_record(insn: &Instruction, out: &mut Vec<u8>) {
    let insn = insn.canonical();
    out.extend_from_slice(&[insn.op as u8, insn.a.index(), insn.b.index(), insn.c.index()]);
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&insn.imm.to_le_bytes());
}

impl ProgramImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            18 + self.code.len() * RECORD_SIZE as usize
                + self.data.iter().map(|d| 13 + d.words.len() * 8).sum::<usize>()
                + self.pins.len() * 8,
        );
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.entry.to_le_bytes());
        out.extend_from_slice(&(self.code.len() as u32).to_le_bytes());
        for insn in &self.code {
            encode_record(insn, &mut out);
        }
        out.extend_from_slice(&(self.data.len() as u32).to_le_bytes());
        for obj in &self.data {
            out.extend_from_slice(&obj.name_hash.to_le_bytes());
            out.push(obj.kind.byte());
            out.extend_from_slice(&(obj.words.len() as u32).to_le_bytes());
            for w in &obj.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.pins.len() as u32).to_le_bytes());
        for pin in &self.pins {
            out.extend_from_slice(&pin.instruction.to_le_bytes());
            out.extend_from_slice(&pin.placement.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ProgramImage, DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(DecodeError::UnsupportedVersion(version));
        }
        let entry = r.u32("entry")?;
        let code_len = r.u32("code length")? as usize;
        let mut code = Vec::with_capacity(code_len.min(bytes.len() / 16));
        for record in 0..code_len {
            let raw = r.take(RECORD_SIZE as usize, "code record")?;
            code.push(decode_record(record, raw)?);
        }
        let data_len = r.u32("data table length")? as usize;
        let mut data = Vec::new();
        for object in 0..data_len {
            let name_hash = r.u64("data object name")?;
            let kind = match r.u8("data object kind")? {
                0 => DataKind::Raw,
                1 => DataKind::JumpTable,
                kind => return Err(DecodeError::BadDataKind { object, kind }),
            };
            let len = r.u32("data object length")? as usize;
            let mut words = Vec::with_capacity(len.min(bytes.len() / 8));
            for _ in 0..len {
                words.push(r.u64("data object payload")? as i64);
            }
            data.push(DataObject { name_hash, kind, words });
        }
        let pin_len = r.u32("pin table length")? as usize;
        let mut pins = Vec::new();
        for _ in 0..pin_len {
            let instruction = r.u32("pin")?;
            let placement = r.u32("pin")?;
            pins.push(Pin { instruction, placement });
        }
        if r.pos != bytes.len() {
            return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(ProgramImage { entry, code, data, pins })
    }

    /// SHA-256 over the canonical byte serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Base word address of each data object, in table order.
    pub fn global_bases(&self) -> Vec<i64> {
        global_bases(self.data.iter().map(|d| d.words.len()))
    }

    /// Checks the semantic invariants that decoding alone does not enforce.
    pub fn check(&self) -> Result<(), String> {
        let len = self.code.len() as u64;
        if self.code.is_empty() {
            return Err("no instructions".into());
        }
        if self.entry as u64 >= len {
            return Err(format!("entry {} out of range", self.entry));
        }
        for (i, insn) in self.code.iter().enumerate() {
            if insn.op.is_direct_branch() && !(0..len as i64).contains(&insn.imm) {
                return Err(format!("record {i}: branch target {} out of range", insn.imm));
            }
        }
        for obj in self.data.iter().filter(|d| d.kind == DataKind::JumpTable) {
            for &w in &obj.words {
                if w < 0 || !(w as u64).is_multiple_of(RECORD_SIZE) || w as u64 / RECORD_SIZE >= len {
                    return Err(format!("jump table {:016x}: word {w} is not a code offset", obj.name_hash));
                }
            }
        }
        for pair in self.pins.windows(2) {
            if pair[0].instruction >= pair[1].instruction {
                return Err("pin table not strictly increasing".into());
            }
        }
        if let Some(pin) = self.pins.iter().find(|p| p.instruction as u64 >= len) {
            return Err(format!("pin on instruction {} out of range", pin.instruction));
        }
        Ok(())
    }
}

/// Packs objects of the given lengths from [`GLOBAL_BASE`], leaving one gap
/// word after each.
pub(crate) fn global_bases(lengths: impl IntoIterator<Item = usize>) -> Vec<i64> {
    let mut next = GLOBAL_BASE;
    lengths
        .into_iter()
        .map(|len| {
            let base = next;
            next += len as i64 + 1;
            base
        })
        .collect()
}
