use std::collections::BTreeMap;

use thiserror::Error;

use super::{AluOp, Instruction, MemOperand, Opcode, Operand, Program, Reg, Width};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// A token together with its 1-based column in the source line.
#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    column: usize,
}

struct Line<'a> {
    number: usize,
    mnemonic: Tok<'a>,
    width: Option<Tok<'a>>,
    operands: Vec<Tok<'a>>,
}

impl Line<'_> {
    fn err(&self, tok: Tok<'_>, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            line: self.number,
            column: tok.column,
            message: message.into(),
        }
    }

    fn arity(&self, n: usize, usage: &str) -> Result<(), SyntaxError> {
        if self.operands.len() == n {
            Ok(())
        } else {
            Err(self.err(
                self.mnemonic,
                format!(
                    "{} expects {} operand(s) (`{}`), found {}",
                    self.mnemonic.text.to_ascii_uppercase(),
                    n,
                    usage,
                    self.operands.len()
                ),
            ))
        }
    }
}

fn trimmed(raw: &str, start: usize) -> Tok<'_> {
    let lead = raw.len() - raw.trim_start().len();
    Tok {
        text: raw.trim(),
        column: start + lead + 1,
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub(crate) fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    if let Some(neg) = s.strip_prefix('-') {
        return parse_u64(neg).and_then(|v| {
            i64::try_from(v)
                .ok()
                .map(|v| v.wrapping_neg() as u64)
                .or((v == 1u64 << 63).then_some(v))
        });
    }
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

fn parse_reg(line: &Line<'_>, tok: Tok<'_>) -> Result<Reg, SyntaxError> {
    let id = tok
        .text
        .strip_prefix(['r', 'R'])
        .and_then(|n| n.parse::<u8>().ok())
        .ok_or_else(|| line.err(tok, format!("expected a register, found `{}`", tok.text)))?;
    Reg::new(id).ok_or_else(|| line.err(tok, format!("bad register `{}` (r0..r15)", tok.text)))
}

fn parse_imm(line: &Line<'_>, tok: Tok<'_>) -> Result<u64, SyntaxError> {
    parse_u64(tok.text)
        .ok_or_else(|| line.err(tok, format!("expected an immediate, found `{}`", tok.text)))
}

fn parse_operand(line: &Line<'_>, tok: Tok<'_>) -> Result<Operand, SyntaxError> {
    if tok.text.starts_with(['r', 'R']) {
        parse_reg(line, tok).map(Operand::Reg)
    } else {
        parse_imm(line, tok).map(Operand::Imm)
    }
}

fn parse_mem(line: &Line<'_>, tok: Tok<'_>) -> Result<MemOperand, SyntaxError> {
    let inner = tok
        .text
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| line.err(tok, format!("expected `[rN+disp]`, found `{}`", tok.text)))?;
    let split = inner.find(['+', '-']);
    let (base, disp) = match split {
        Some(at) => (&inner[..at], Some(&inner[at..])),
        None => (inner, None),
    };
    let base = parse_reg(
        line,
        Tok {
            text: base.trim(),
            column: tok.column + 1,
        },
    )?;
    let disp = match disp {
        None => 0,
        Some(d) => {
            let (negative, magnitude) = match d.split_at(1) {
                ("-", m) => (true, m),
                (_, m) => (false, m),
            };
            let bad = || {
                line.err(
                    tok,
                    format!("displacement `{d}` out of signed 32-bit range"),
                )
            };
            let m = parse_u64(magnitude).ok_or_else(bad)?;
            let v = if negative { -(m as i128) } else { m as i128 };
            i32::try_from(v).map_err(|_| bad())?
        }
    };
    Ok(MemOperand { base, disp })
}

fn parse_width(line: &Line<'_>) -> Result<Width, SyntaxError> {
    match line.width {
        None => Ok(Width::QUAD),
        Some(tok) => tok
            .text
            .parse::<u8>()
            .ok()
            .and_then(Width::new)
            .ok_or_else(|| {
                line.err(
                    tok,
                    format!("bad access width `.{}` (1, 2, 4 or 8)", tok.text),
                )
            }),
    }
}

fn split_line(number: usize, code: &str) -> Line<'_> {
    let lead = code.len() - code.trim_start().len();
    let body = code.trim_start();
    let mn_end = body.find(char::is_whitespace).unwrap_or(body.len());
    let head = &body[..mn_end];
    let (mnemonic, width) = match head.split_once('.') {
        Some((m, w)) => (
            Tok {
                text: m,
                column: lead + 1,
            },
            Some(Tok {
                text: w,
                column: lead + m.len() + 2,
            }),
        ),
        None => (
            Tok {
                text: head,
                column: lead + 1,
            },
            None,
        ),
    };
    let rest_start = lead + mn_end;
    let rest = &code[rest_start..];
    let mut operands = Vec::new();
    if !rest.trim().is_empty() {
        let mut offset = rest_start;
        for piece in rest.split(',') {
            operands.push(trimmed(piece, offset));
            offset += piece.len() + 1;
        }
    }
    Line {
        number,
        mnemonic,
        width,
        operands,
    }
}

fn resolve_target(
    line: &Line<'_>,
    tok: Tok<'_>,
    labels: &BTreeMap<String, usize>,
    len: usize,
) -> Result<usize, SyntaxError> {
    let target = match tok.text.strip_prefix('@') {
        Some(index) => index
            .parse::<usize>()
            .map_err(|_| line.err(tok, format!("bad absolute target `{}`", tok.text)))?,
        None => *labels
            .get(tok.text)
            .ok_or_else(|| line.err(tok, format!("unresolved label `{}`", tok.text)))?,
    };
    if target >= len {
        return Err(line.err(
            tok,
            format!("jump target `{}` is past the last instruction", tok.text),
        ));
    }
    Ok(target)
}

fn build(
    line: &Line<'_>,
    labels: &BTreeMap<String, usize>,
    len: usize,
) -> Result<Instruction, SyntaxError> {
    let opcode = Opcode::from_mnemonic(line.mnemonic.text).ok_or_else(|| {
        line.err(
            line.mnemonic,
            format!("unknown mnemonic `{}`", line.mnemonic.text),
        )
    })?;
    if line.width.is_some() && !matches!(opcode, Opcode::Ld | Opcode::St) {
        return Err(line.err(
            line.mnemonic,
            format!("{opcode} does not take a width suffix"),
        ));
    }
    let ops = &line.operands;
    let alu = |op: AluOp| -> Result<Instruction, SyntaxError> {
        line.arity(2, "rD, rS|imm")?;
        Ok(Instruction::Alu {
            op,
            dst: parse_reg(line, ops[0])?,
            src: parse_operand(line, ops[1])?,
        })
    };
    Ok(match opcode {
        Opcode::Ldi => {
            line.arity(2, "rD, imm")?;
            Instruction::Ldi {
                dst: parse_reg(line, ops[0])?,
                imm: parse_imm(line, ops[1])?,
            }
        }
        Opcode::Ld => {
            line.arity(2, "rD, [rB+disp]")?;
            Instruction::Ld {
                dst: parse_reg(line, ops[0])?,
                mem: parse_mem(line, ops[1])?,
                width: parse_width(line)?,
            }
        }
        Opcode::St => {
            line.arity(2, "[rB+disp], rS|imm")?;
            Instruction::St {
                mem: parse_mem(line, ops[0])?,
                src: parse_operand(line, ops[1])?,
                width: parse_width(line)?,
            }
        }
        Opcode::Add => alu(AluOp::Add)?,
        Opcode::Or => alu(AluOp::Or)?,
        Opcode::And => alu(AluOp::And)?,
        Opcode::Shl => alu(AluOp::Shl)?,
        Opcode::Clflush => {
            line.arity(1, "[rB+disp]")?;
            Instruction::Clflush {
                mem: parse_mem(line, ops[0])?,
            }
        }
        Opcode::Lfence => {
            line.arity(0, "")?;
            Instruction::Lfence
        }
        Opcode::Rdt => {
            line.arity(1, "rD")?;
            Instruction::Rdt {
                dst: parse_reg(line, ops[0])?,
            }
        }
        Opcode::Jnz => {
            // The target is resolved before arity is checked so that a
            // dangling label is reported by name.
            let last = *ops
                .last()
                .ok_or_else(|| line.err(line.mnemonic, "JNZ expects `rS, label`"))?;
            let target = resolve_target(line, last, labels, len)?;
            line.arity(2, "rS, label")?;
            Instruction::Jnz {
                cond: parse_reg(line, ops[0])?,
                target,
            }
        }
        Opcode::Ctxsw => {
            line.arity(1, "context")?;
            let to = parse_imm(line, ops[0])?;
            Instruction::Ctxsw {
                to: u16::try_from(to)
                    .map_err(|_| line.err(ops[0], format!("context id {to} out of range")))?,
            }
        }
        Opcode::Hlt => {
            line.arity(0, "")?;
            Instruction::Hlt
        }
    })
}

/// Assembles `text` into a [`Program`]. One instruction or `label:` per
/// line, `;` starts a comment.
pub fn parse_program(text: &str) -> Result<Program, SyntaxError> {
    let mut labels = BTreeMap::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        let code = raw.split(';').next().unwrap_or("");
        let trimmed_code = code.trim();
        if trimmed_code.is_empty() {
            continue;
        }
        if let Some(name) = trimmed_code.strip_suffix(':') {
            let column = code.len() - code.trim_start().len() + 1;
            let name = name.trim();
            if !is_identifier(name) {
                return Err(SyntaxError {
                    line: number,
                    column,
                    message: format!("bad label name `{name}`"),
                });
            }
            if labels.insert(name.to_string(), lines.len()).is_some() {
                return Err(SyntaxError {
                    line: number,
                    column,
                    message: format!("duplicate label `{name}`"),
                });
            }
            continue;
        }
        lines.push(split_line(number, code));
    }
    let len = lines.len();
    let instructions = lines
        .iter()
        .map(|line| build(line, &labels, len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Program {
        instructions,
        labels,
        entry: 0,
    })
}
