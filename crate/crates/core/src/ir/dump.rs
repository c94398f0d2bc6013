use std::fmt::Write;

use super::{IrDataKind, ProgramIR};

/// Human-readable listing: data table, then blocks in layout order.
pub(super) fn dump(ir: &ProgramIR) -> String {
    let p = ir.parts();
    let mut out = String::new();
    match p.entry {
        Some(e) => writeln!(out, "entry {e}").unwrap(),
        None => writeln!(out, "entry <none>").unwrap(),
    }
    if !p.metadata.applied.is_empty() {
        writeln!(out, "applied {}", p.metadata.applied.join(" ")).unwrap();
    }
    for obj in &p.data {
        match &obj.kind {
            IrDataKind::Raw(words) => {
                writeln!(out, "data {} #{:016x} raw {:?}", obj.id, obj.name_hash, words).unwrap()
            }
            IrDataKind::JumpTable(entries) => {
                let list: Vec<String> = entries.iter().map(ToString::to_string).collect();
                writeln!(out, "data {} #{:016x} jumptable [{}]", obj.id, obj.name_hash, list.join(" ")).unwrap()
            }
        }
    }
    for b in ir.layout_order() {
        let succ: Vec<String> = b.successors.iter().map(ToString::to_string).collect();
        writeln!(out, "{} rank={} succ=[{}]", b.id, b.layout_rank, succ.join(" ")).unwrap();
        for m in &b.members {
            let Some(i) = p.instructions.get(m) else {
                writeln!(out, "  {m} <missing>").unwrap();
                continue;
            };
            write!(out, "  {m}").unwrap();
            match i.original_offset {
                Some(o) => write!(out, " @{o}").unwrap(),
                None => write!(out, " @new").unwrap(),
            }
            write!(out, "  {}", i.payload).unwrap();
            if let Some(t) = i.target {
                write!(out, " -> {t}").unwrap();
            }
            if let Some(g) = i.global_ref {
                write!(out, " [{}+{}]", g.object, g.offset).unwrap();
            }
            if i.ambiguous_global {
                write!(out, " [ambiguous]").unwrap();
            }
            if let Some(pin) = p.pins.get(m) {
                write!(out, " pin={pin}").unwrap();
            }
            if let Some(ft) = i.fallthrough {
                write!(out, " ft={ft}").unwrap();
            }
            out.push('\n');
        }
    }
    for d in &p.dead_code {
        writeln!(out, "dead @{}  {}", d.original_offset, d.instruction).unwrap();
    }
    out
}
