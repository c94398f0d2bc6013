use std::collections::BTreeSet;
use std::fmt::Write;

use super::{DataKind, Operands, ProgramImage, RECORD_SIZE};

fn label(offset: u64) -> String {
    format!("L{offset}")
}

/// Renders an image as `.dasm` text. Offsets become synthetic `L<offset>`
/// labels and global addresses become `@#<hash>+k` references, so
/// re-assembling the output reproduces the image byte for byte.
pub fn disassemble(image: &ProgramImage) -> String {
    let len = image.code.len() as u64;
    let mut targets = BTreeSet::new();
    targets.insert(image.entry as u64);
    for insn in &image.code {
        if insn.op.is_direct_branch() && insn.imm >= 0 && (insn.imm as u64) < len {
            targets.insert(insn.imm as u64);
        }
    }
    for obj in image.data.iter().filter(|d| d.kind == DataKind::JumpTable) {
        targets.extend(obj.words.iter().map(|&w| w as u64 / RECORD_SIZE));
    }
    targets.extend(image.pins.iter().map(|p| p.instruction as u64));

    let bases = image.global_bases();
    let global_ref = |imm: i64| -> Option<String> {
        image.data.iter().zip(&bases).find_map(|(obj, &base)| {
            let off = imm.checked_sub(base)?;
            (0..=obj.words.len() as i64).contains(&off).then(|| {
                if off == 0 {
                    format!("@#{:016x}", obj.name_hash)
                } else {
                    format!("@#{:016x}+{off}", obj.name_hash)
                }
            })
        })
    };

    let mut out = String::new();
    writeln!(out, ".entry {}", label(image.entry as u64)).unwrap();
    for obj in &image.data {
        match obj.kind {
            DataKind::Raw => {
                write!(out, ".global #{:016x}, {}", obj.name_hash, obj.words.len()).unwrap();
                let last_nonzero = obj.words.iter().rposition(|&w| w != 0).map_or(0, |p| p + 1);
                for w in &obj.words[..last_nonzero] {
                    write!(out, ", {w}").unwrap();
                }
                out.push('\n');
            }
            DataKind::JumpTable => {
                write!(out, ".jumptable #{:016x}:", obj.name_hash).unwrap();
                for &w in &obj.words {
                    write!(out, " {}", label(w as u64 / RECORD_SIZE)).unwrap();
                }
                out.push('\n');
            }
        }
    }
    for pin in &image.pins {
        writeln!(out, ".pin {} {}", label(pin.instruction as u64), pin.placement).unwrap();
    }

    for (i, insn) in image.code.iter().enumerate() {
        if targets.contains(&(i as u64)) {
            writeln!(out, "{}:", label(i as u64)).unwrap();
        }
        let m = insn.op.mnemonic();
        let target = |imm: i64| {
            if imm >= 0 && (imm as u64) < len {
                label(imm as u64)
            } else {
                imm.to_string()
            }
        };
        let imm = |imm: i64| global_ref(imm).unwrap_or_else(|| imm.to_string());
        let text = match insn.op.operands() {
            Operands::Imm if insn.op.is_direct_branch() => format!("{m} {}", target(insn.imm)),
            Operands::ABImm if insn.op.is_direct_branch() => {
                format!("{m} {}, {}, {}", insn.a, insn.b, target(insn.imm))
            }
            Operands::AImm => format!("{m} {}, {}", insn.a, imm(insn.imm)),
            Operands::ABImm if !insn.b.is_sp() => {
                format!("{m} {}, {}, {}", insn.a, insn.b, imm(insn.imm))
            }
            _ => insn.to_string(),
        };
        writeln!(out, "    {text}").unwrap();
    }
    out
}
