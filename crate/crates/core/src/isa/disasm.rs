use std::fmt::Write;

use super::{Instruction, MemOperand, Operand, Program, Width};

fn mem(m: MemOperand) -> String {
    match m.disp {
        0 => format!("[{}]", m.base),
        d if d < 0 => format!("[{}-{}]", m.base, (d as i64).unsigned_abs()),
        d => format!("[{}+{}]", m.base, d),
    }
}

fn operand(o: Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => format!("{v:#x}"),
    }
}

fn suffix(w: Width) -> String {
    if w == Width::QUAD {
        String::new()
    } else {
        format!(".{}", w.bytes())
    }
}

fn target_name(program: &Program, target: usize) -> String {
    program
        .labels
        .iter()
        .find(|(_, &idx)| idx == target)
        .map(|(name, _)| name.clone())
        .unwrap_or_else(|| format!("@{target}"))
}

fn render(program: &Program, instr: &Instruction) -> String {
    let name = instr.opcode().mnemonic();
    match *instr {
        Instruction::Ldi { dst, imm } => format!("{name} {dst}, {imm:#x}"),
        Instruction::Ld { dst, mem: m, width } => {
            format!("{name}{} {dst}, {}", suffix(width), mem(m))
        }
        Instruction::St { mem: m, src, width } => {
            format!("{name}{} {}, {}", suffix(width), mem(m), operand(src))
        }
        Instruction::Alu { dst, src, .. } => format!("{name} {dst}, {}", operand(src)),
        Instruction::Clflush { mem: m } => format!("{name} {}", mem(m)),
        Instruction::Rdt { dst } => format!("{name} {dst}"),
        Instruction::Jnz { cond, target } => {
            format!("{name} {cond}, {}", target_name(program, target))
        }
        Instruction::Ctxsw { to } => format!("{name} {to}"),
        Instruction::Lfence | Instruction::Hlt => name.to_string(),
    }
}

/// Renders `program` as assembly that [`super::parse_program`] reads back
/// to a structurally equal program.
pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    let emit_labels = |out: &mut String, index: usize| {
        for (name, _) in program.labels.iter().filter(|(_, &i)| i == index) {
            let _ = writeln!(out, "{name}:");
        }
    };
    for (index, instr) in program.instructions.iter().enumerate() {
        emit_labels(&mut out, index);
        if program.labels.is_empty() {
            let _ = writeln!(out, "{}", render(program, instr));
        } else {
            let _ = writeln!(out, "    {}", render(program, instr));
        }
    }
    emit_labels(&mut out, program.len());
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{parse_program, Program};
    use super::*;

    #[test]
    fn halt_alone() {
        assert_eq!(disassemble(&Program::new(vec![Instruction::Hlt])), "HLT");
    }

    #[test]
    fn wide_immediates_render_hex_and_reparse() {
        let p = parse_program("LDI r1, 18378908604322283520\nST.1 [r1-4096], r1\nHLT").unwrap();
        let text = disassemble(&p);
        assert!(text.contains("0xff0f000000000000"), "{text}");
        assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn unlabelled_targets_use_absolute_form() {
        let mut p = parse_program("LDI r1, 1\nJNZ r1, end\nend:\nHLT").unwrap();
        p.labels.clear();
        let text = disassemble(&p);
        assert!(text.contains("JNZ r1, @2"), "{text}");
        assert_eq!(parse_program(&text).unwrap(), p);
    }
}
