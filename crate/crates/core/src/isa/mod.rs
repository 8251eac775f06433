//! The minimal instruction set attack programs are written in.
//!
//! Sixteen 64-bit registers, no flags. Memory operands are
//! `[rN+disp]` with a signed 32-bit displacement; `LD` and `ST` take an
//! optional width suffix (`LD.1`, `ST.4`, ...) and default to 8 bytes.

mod disasm;
pub mod listings;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

pub use disasm::disassemble;
pub(crate) use parse::parse_u64;
pub use parse::{parse_program, SyntaxError};

pub const NUM_REGS: usize = 16;

/// Architectural register id, always in `0..16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub fn new(id: u8) -> Option<Reg> {
        (usize::from(id) < NUM_REGS).then_some(Reg(id))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Register or 64-bit immediate source operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

/// Base register plus signed displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemOperand {
    pub base: Reg,
    pub disp: i32,
}

impl MemOperand {
    pub fn new(base: Reg, disp: i32) -> Self {
        MemOperand { base, disp }
    }

    pub fn effective(&self, base_value: u64) -> u64 {
        base_value.wrapping_add(self.disp as i64 as u64)
    }
}

/// Access width in bytes: 1, 2, 4 or 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Width(u8);

impl Width {
    pub const BYTE: Width = Width(1);
    pub const QUAD: Width = Width(8);

    pub fn new(bytes: u8) -> Option<Width> {
        matches!(bytes, 1 | 2 | 4 | 8).then_some(Width(bytes))
    }

    pub fn bytes(self) -> u64 {
        u64::from(self.0)
    }

    pub fn mask(self) -> u64 {
        if self.0 == 8 {
            u64::MAX
        } else {
            (1u64 << (8 * self.0)) - 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Or,
    And,
    Shl,
}

impl AluOp {
    pub fn apply(self, lhs: u64, rhs: u64) -> u64 {
        match self {
            AluOp::Add => lhs.wrapping_add(rhs),
            AluOp::Or => lhs | rhs,
            AluOp::And => lhs & rhs,
            AluOp::Shl => lhs.checked_shl((rhs & 63) as u32).unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Ldi,
    Ld,
    St,
    Add,
    Or,
    And,
    Shl,
    Clflush,
    Lfence,
    Rdt,
    Jnz,
    Ctxsw,
    Hlt,
}

impl Opcode {
    pub const ALL: [Opcode; 13] = [
        Opcode::Ldi,
        Opcode::Ld,
        Opcode::St,
        Opcode::Add,
        Opcode::Or,
        Opcode::And,
        Opcode::Shl,
        Opcode::Clflush,
        Opcode::Lfence,
        Opcode::Rdt,
        Opcode::Jnz,
        Opcode::Ctxsw,
        Opcode::Hlt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Ldi => "LDI",
            Opcode::Ld => "LD",
            Opcode::St => "ST",
            Opcode::Add => "ADD",
            Opcode::Or => "OR",
            Opcode::And => "AND",
            Opcode::Shl => "SHL",
            Opcode::Clflush => "CLFLUSH",
            Opcode::Lfence => "LFENCE",
            Opcode::Rdt => "RDT",
            Opcode::Jnz => "JNZ",
            Opcode::Ctxsw => "CTXSW",
            Opcode::Hlt => "HLT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL
            .into_iter()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One decoded instruction. Operand shapes are fixed per opcode, so the
/// "memory ops carry exactly one address expression" rule holds by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Ldi {
        dst: Reg,
        imm: u64,
    },
    Ld {
        dst: Reg,
        mem: MemOperand,
        width: Width,
    },
    St {
        mem: MemOperand,
        src: Operand,
        width: Width,
    },
    Alu {
        op: AluOp,
        dst: Reg,
        src: Operand,
    },
    Clflush {
        mem: MemOperand,
    },
    Lfence,
    Rdt {
        dst: Reg,
    },
    Jnz {
        cond: Reg,
        target: usize,
    },
    /// Switch the issuing hardware thread to another address space.
    Ctxsw {
        to: u16,
    },
    Hlt,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Ldi { .. } => Opcode::Ldi,
            Instruction::Ld { .. } => Opcode::Ld,
            Instruction::St { .. } => Opcode::St,
            Instruction::Alu { op, .. } => match op {
                AluOp::Add => Opcode::Add,
                AluOp::Or => Opcode::Or,
                AluOp::And => Opcode::And,
                AluOp::Shl => Opcode::Shl,
            },
            Instruction::Clflush { .. } => Opcode::Clflush,
            Instruction::Lfence => Opcode::Lfence,
            Instruction::Rdt { .. } => Opcode::Rdt,
            Instruction::Jnz { .. } => Opcode::Jnz,
            Instruction::Ctxsw { .. } => Opcode::Ctxsw,
            Instruction::Hlt => Opcode::Hlt,
        }
    }

    pub fn dst(&self) -> Option<Reg> {
        match *self {
            Instruction::Ldi { dst, .. }
            | Instruction::Ld { dst, .. }
            | Instruction::Alu { dst, .. }
            | Instruction::Rdt { dst } => Some(dst),
            _ => None,
        }
    }

    /// Registers read by this instruction, in a fixed order.
    pub fn sources(&self) -> Vec<Reg> {
        match *self {
            Instruction::Ld { mem, .. } | Instruction::Clflush { mem } => vec![mem.base],
            Instruction::St { mem, src, .. } => match src {
                Operand::Reg(r) => vec![mem.base, r],
                Operand::Imm(_) => vec![mem.base],
            },
            Instruction::Alu { dst, src, .. } => match src {
                Operand::Reg(r) => vec![dst, r],
                Operand::Imm(_) => vec![dst],
            },
            Instruction::Jnz { cond, .. } => vec![cond],
            _ => Vec::new(),
        }
    }

    pub fn mem(&self) -> Option<MemOperand> {
        match *self {
            Instruction::Ld { mem, .. }
            | Instruction::St { mem, .. }
            | Instruction::Clflush { mem } => Some(mem),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub entry: usize,
}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Program {
            instructions,
            labels: BTreeMap::new(),
            entry: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn count(&self, opcode: Opcode) -> usize {
        self.instructions
            .iter()
            .filter(|i| i.opcode() == opcode)
            .count()
    }

    /// Indices of `HLT` instructions statically reachable from `entry`.
    /// Scenario programs are expected to have exactly one.
    pub fn reachable_halts(&self) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![self.entry];
        let mut halts = Vec::new();
        while let Some(pc) = stack.pop() {
            if pc >= self.len() || seen[pc] {
                continue;
            }
            seen[pc] = true;
            match self.instructions[pc] {
                Instruction::Hlt => halts.push(pc),
                Instruction::Jnz { target, .. } => {
                    stack.push(target);
                    stack.push(pc + 1);
                }
                _ => stack.push(pc + 1),
            }
        }
        halts.sort_unstable();
        halts
    }
}
