//! Two-pass assembler for `.dasm` text. The grammar is documented in
//! `docs/dasm.md` at the repository root.

use std::collections::HashMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::image::global_bases;
use super::{DataKind, DataObject, Instruction, Opcode, Operands, Pin, ProgramImage, Reg, RECORD_SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("no instructions")]
    NoInstructions,
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: undefined global `{name}`")]
    UndefinedGlobal { line: usize, name: String },
    #[error("line {line}: duplicate data object `{name}`")]
    DuplicateGlobal { line: usize, name: String },
    #[error("line {line}: immediate overflow in `{text}`")]
    ImmediateOverflow { line: usize, text: String },
    #[error("line {line}: malformed directive `{text}`")]
    MalformedDirective { line: usize, text: String },
    #[error("line {line}: unknown mnemonic `{text}`")]
    UnknownMnemonic { line: usize, text: String },
    #[error("line {line}: bad operand `{text}`")]
    BadOperand { line: usize, text: String },
}

/// Hash used to name data objects in the image: the first eight bytes of
/// SHA-256 of the name, little-endian. `#` followed by 16 hex digits names a
/// hash directly, which is what the disassembler emits.
pub fn name_hash(name: &str) -> u64 {
    if let Some(hex) = name.strip_prefix('#') {
        if let Ok(h) = u64::from_str_radix(hex, 16) {
            return h;
        }
    }
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn is_data_name(s: &str) -> bool {
    match s.strip_prefix('#') {
        Some(hex) => hex.len() == 16 && hex.chars().all(|c| c.is_ascii_hexdigit()),
        None => is_ident(s),
    }
}

fn parse_int(line: usize, text: &str) -> Result<i64, AsmError> {
    let t = text.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16)
    } else if !body.is_empty() && body.chars().all(|c| c.is_ascii_digit()) {
        body.parse::<i128>()
    } else {
        return Err(AsmError::BadOperand { line, text: t.to_string() });
    };
    let magnitude = magnitude.map_err(|_| AsmError::ImmediateOverflow { line, text: t.to_string() })?;
    let value = if neg { -magnitude } else { magnitude };
    i64::try_from(value).map_err(|_| AsmError::ImmediateOverflow { line, text: t.to_string() })
}

fn looks_numeric(text: &str) -> bool {
    let t = text.trim_start_matches(['-', '+']);
    t.starts_with(|c: char| c.is_ascii_digit())
}

fn parse_reg(line: usize, text: &str) -> Result<Reg, AsmError> {
    let bad = || AsmError::BadOperand { line, text: text.to_string() };
    if text == "sp" {
        return Ok(Reg::SP);
    }
    let idx: u8 = text.strip_prefix('r').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    Reg::new(idx).ok_or_else(bad)
}

struct Global {
    name: String,
    kind: DataKind,
    len: usize,
    init: Vec<i64>,
    labels: Vec<String>,
    line: usize,
}

struct Pending<'a> {
    line: usize,
    op: Opcode,
    operands: Vec<&'a str>,
}

/// Assembles `.dasm` source into an image.
pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut globals: Vec<Global> = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut entry_label: Option<(usize, String)> = None;
    let mut pin_labels: Vec<(usize, String, u32)> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if text.starts_with('.') {
            parse_directive(line, text, &mut globals, &mut entry_label, &mut pin_labels)?;
            continue;
        }
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_ident(label) {
                return Err(AsmError::BadOperand { line, text: label.to_string() });
            }
            if labels.insert(label.to_string(), pending.len()).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: label.to_string() });
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let op = Opcode::from_mnemonic(&mnemonic.to_ascii_lowercase())
            .ok_or_else(|| AsmError::UnknownMnemonic { line, text: mnemonic.to_string() })?;
        let operands: Vec<&str> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        pending.push(Pending { line, op, operands });
    }

    if pending.is_empty() {
        return Err(AsmError::NoInstructions);
    }

    let bases = global_bases(globals.iter().map(|g| g.len));
    let global_index: HashMap<u64, usize> =
        globals.iter().enumerate().map(|(i, g)| (name_hash(&g.name), i)).collect();

    let resolve_label = |line: usize, text: &str| -> Result<i64, AsmError> {
        if looks_numeric(text) {
            return parse_int(line, text);
        }
        labels
            .get(text)
            .map(|&off| off as i64)
            .ok_or_else(|| AsmError::UndefinedLabel { line, label: text.to_string() })
    };

    let resolve_imm = |line: usize, text: &str| -> Result<i64, AsmError> {
        let Some(sym) = text.strip_prefix('@') else {
            return parse_int(line, text);
        };
        let (name, offset) = match sym.find(['+', '-']) {
            Some(pos) => (&sym[..pos], parse_int(line, &sym[pos..])?),
            None => (sym, 0),
        };
        let &gi = global_index
            .get(&name_hash(name))
            .ok_or_else(|| AsmError::UndefinedGlobal { line, name: name.to_string() })?;
        bases[gi]
            .checked_add(offset)
            .ok_or_else(|| AsmError::ImmediateOverflow { line, text: text.to_string() })
    };

    let mut code = Vec::with_capacity(pending.len());
    for p in &pending {
        let want = match p.op.operands() {
            Operands::None => 0,
            Operands::A | Operands::Imm => 1,
            Operands::AB | Operands::AImm => 2,
            Operands::ABC | Operands::ABImm => 3,
        };
        if p.operands.len() != want {
            return Err(AsmError::BadOperand { line: p.line, text: p.operands.join(", ") });
        }
        let ops = &p.operands;
        let reg = |i: usize| parse_reg(p.line, ops[i]);
        let target_or_imm = |i: usize| {
            if p.op.is_direct_branch() {
                resolve_label(p.line, ops[i])
            } else {
                resolve_imm(p.line, ops[i])
            }
        };
        let insn = match p.op.operands() {
            Operands::None => Instruction::nullary(p.op),
            Operands::A => Instruction::unary(p.op, reg(0)?),
            Operands::AB => Instruction::arith(p.op, reg(0)?, reg(1)?, Reg::r(0)).canonical(),
            Operands::ABC => Instruction::arith(p.op, reg(0)?, reg(1)?, reg(2)?),
            Operands::AImm => Instruction::movi(reg(0)?, target_or_imm(1)?),
            Operands::ABImm => Instruction::cond(p.op, reg(0)?, reg(1)?, target_or_imm(2)?),
            Operands::Imm => Instruction::imm_only(p.op, target_or_imm(0)?),
        };
        code.push(insn);
    }

    let mut data = Vec::with_capacity(globals.len());
    let mut seen = HashMap::new();
    for g in &globals {
        let hash = name_hash(&g.name);
        if seen.insert(hash, ()).is_some() {
            return Err(AsmError::DuplicateGlobal { line: g.line, name: g.name.clone() });
        }
        let words = match g.kind {
            DataKind::Raw => {
                let mut words = g.init.clone();
                words.resize(g.len, 0);
                words
            }
            DataKind::JumpTable => g
                .labels
                .iter()
                .map(|l| resolve_label(g.line, l).map(|off| off * RECORD_SIZE as i64))
                .collect::<Result<_, _>>()?,
        };
        data.push(DataObject { name_hash: hash, kind: g.kind, words });
    }

    let entry = match entry_label {
        Some((line, label)) => resolve_label(line, &label)?,
        None => 0,
    };

    let mut pins = Vec::with_capacity(pin_labels.len());
    for (line, label, placement) in &pin_labels {
        let instruction = resolve_label(*line, label)? as u32;
        pins.push((*line, Pin { instruction, placement: *placement }));
    }
    pins.sort_by_key(|(_, p)| p.instruction);
    for pair in pins.windows(2) {
        if pair[0].1.instruction == pair[1].1.instruction {
            return Err(AsmError::MalformedDirective {
                line: pair[1].0,
                text: format!(".pin on an already pinned instruction {}", pair[1].1.instruction),
            });
        }
    }

    let image = ProgramImage {
        entry: entry as u32,
        code,
        data,
        pins: pins.into_iter().map(|(_, p)| p).collect(),
    };
    // branch immediates given as raw numbers are not range-checked above
    if let Err(msg) = image.check() {
        return Err(AsmError::BadOperand { line: 0, text: msg });
    }
    Ok(image)
}

fn parse_directive(
    line: usize,
    text: &str,
    globals: &mut Vec<Global>,
    entry: &mut Option<(usize, String)>,
    pins: &mut Vec<(usize, String, u32)>,
) -> Result<(), AsmError> {
    let malformed = || AsmError::MalformedDirective { line, text: text.to_string() };
    let (name, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    let rest = rest.trim();
    match name {
        ".entry" => {
            if !is_ident(rest) {
                return Err(malformed());
            }
            *entry = Some((line, rest.to_string()));
        }
        ".global" => {
            let cleaned = rest.replace(['[', ']'], " ");
            let mut fields = cleaned.split(',').map(str::trim).filter(|s| !s.is_empty());
            let gname = fields.next().filter(|n| is_data_name(n)).ok_or_else(malformed)?;
            let len_text = fields.next().ok_or_else(malformed)?;
            let len = parse_int(line, len_text).map_err(|_| malformed())?;
            let len = usize::try_from(len).map_err(|_| malformed())?;
            let init: Vec<i64> = fields
                .flat_map(|f| f.split_whitespace())
                .map(|w| parse_int(line, w))
                .collect::<Result<_, _>>()?;
            if init.len() > len {
                return Err(malformed());
            }
            globals.push(Global {
                name: gname.to_string(),
                kind: DataKind::Raw,
                len,
                init,
                labels: Vec::new(),
                line,
            });
        }
        ".jumptable" => {
            let (tname, targets) = rest.split_once(':').ok_or_else(malformed)?;
            let tname = tname.trim();
            if !is_data_name(tname) {
                return Err(malformed());
            }
            let labels: Vec<String> = targets
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if labels.is_empty() {
                return Err(malformed());
            }
            globals.push(Global {
                name: tname.to_string(),
                kind: DataKind::JumpTable,
                len: labels.len(),
                init: Vec::new(),
                labels,
                line,
            });
        }
        ".pin" => {
            let mut parts = rest.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
            let label = parts.next().filter(|l| is_ident(l)).ok_or_else(malformed)?;
            let offset = parts.next().ok_or_else(malformed)?;
            if parts.next().is_some() {
                return Err(malformed());
            }
            let offset = parse_int(line, offset).map_err(|_| malformed())?;
            let offset = u32::try_from(offset).map_err(|_| malformed())?;
            pins.push((line, label.to_string(), offset));
        }
        _ => return Err(malformed()),
    }
    Ok(())
}
