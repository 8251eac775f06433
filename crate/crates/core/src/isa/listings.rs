//! Program generators for the canonical attack sequences.

use super::{AluOp, Instruction, MemOperand, Operand, Program, Reg, Width};

/// OR-ed into a canonical user address to produce its non-canonical alias.
pub const NONCANONICAL_MASK: u64 = 0xff0f_0000_0000_0000;
/// Default user page the secret is stored to.
pub const ADDR1: u64 = 0x0000_1000_0000_0000;
/// Default base of the 256-slot probe array.
pub const ORACLE_BASE: u64 = 0x0000_2000_0000_0000;
/// log2 of the probe stride (4096).
pub const ORACLE_SHIFT: u64 = 12;

fn r(id: u8) -> Reg {
    Reg::new(id).expect("register id in range")
}

/// Store `secret` to `ADDR1 + offset`, alias the address through
/// [`NONCANONICAL_MASK`], load one byte through the alias and touch
/// `ORACLE_BASE + byte * 4096`.
///
/// An `LFENCE` after the store lets it commit first, so the aliased load
/// sources its byte from the L1D line.
///
/// # Panics
/// If `offset` is not inside one page.
pub fn encode_listing2(secret: u8, offset: u16) -> Program {
    assert!(offset < 4096, "offset {offset} is not a page offset");
    let disp = i32::from(offset);
    Program::new(vec![
        Instruction::Ldi {
            dst: r(1),
            imm: ADDR1,
        },
        Instruction::Ldi {
            dst: r(2),
            imm: u64::from(secret),
        },
        Instruction::St {
            mem: MemOperand::new(r(1), disp),
            src: Operand::Reg(r(2)),
            width: Width::BYTE,
        },
        Instruction::Lfence,
        Instruction::Ldi {
            dst: r(3),
            imm: NONCANONICAL_MASK,
        },
        Instruction::Alu {
            op: AluOp::Or,
            dst: r(3),
            src: Operand::Reg(r(1)),
        },
        Instruction::Ld {
            dst: r(4),
            mem: MemOperand::new(r(3), disp),
            width: Width::BYTE,
        },
        Instruction::Alu {
            op: AluOp::Shl,
            dst: r(4),
            src: Operand::Imm(ORACLE_SHIFT),
        },
        Instruction::Ldi {
            dst: r(5),
            imm: ORACLE_BASE,
        },
        Instruction::Alu {
            op: AluOp::Add,
            dst: r(5),
            src: Operand::Reg(r(4)),
        },
        Instruction::Ld {
            dst: r(6),
            mem: MemOperand::new(r(5), 0),
            width: Width::BYTE,
        },
        Instruction::Hlt,
    ])
}

#[cfg(test)]
mod tests {
    use super::super::{disassemble, parse_program, Opcode};
    use super::*;

    #[test]
    fn one_mask_or_and_two_loads() {
        for secret in [0u8, 0x2a, 0xff] {
            let p = encode_listing2(secret, 8);
            let ors: Vec<_> = p
                .instructions
                .iter()
                .filter(|i| i.opcode() == Opcode::Or)
                .collect();
            assert_eq!(ors.len(), 1);
            assert!(p.instructions.contains(&Instruction::Ldi {
                dst: r(3),
                imm: NONCANONICAL_MASK
            }));
            assert_eq!(p.count(Opcode::Ld), 2);
            assert_eq!(p.reachable_halts().len(), 1);
        }
    }

    #[test]
    fn round_trips_through_text() {
        let p = encode_listing2(0x2a, 0);
        assert_eq!(parse_program(&disassemble(&p)).unwrap(), p);
    }

    #[test]
    #[should_panic]
    fn offset_must_fit_in_page() {
        encode_listing2(1, 4096);
    }
}
