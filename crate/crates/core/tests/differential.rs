//! Architectural equivalence between the out-of-order core and the
//! in-order reference interpreter on random programs.

mod common;

use common::{differential, oracle_alias, oracle_is_canonical, regions, Exit, Interp};
use ncsim::isa::parse_program;
use ncsim::pipeline::FaultKind;
use ncsim::vmem::{canonical_alias, is_canonical, VirtAddr};
use proptest::prelude::*;

pub const PROGRAMS: u64 = 1000;

#[test]
fn random_programs_match_the_reference() {
    let stats = differential(PROGRAMS).unwrap_or_else(|e| panic!("{e}"));
    // The generator has to exercise every outcome to mean anything.
    assert!(stats.halted > 50, "{stats:?}");
    assert!(stats.faults.iter().all(|&n| n > 20), "{stats:?}");
}

#[test]
fn reference_interpreter_by_hand() {
    let text = "
        LDI r1, 0x100000000000
        LDI r2, 0x1234
        ST.2 [r1+8], r2
        LD r3, [r1+7]
        CTXSW 1
        LD.1 r4, [r1+9]
        LDI r5, 0xffff800000000000
        LD r6, [r5]
    ";
    let state = Interp::new(&regions(), &[(0x100007, 0xee), (0x180009, 0x55)])
        .run(&parse_program(text).unwrap(), 100);
    assert_eq!(state.regs[3], 0x1234ee);
    assert_eq!(state.regs[4], 0x55);
    assert_eq!(state.asid, 1);
    assert_eq!(
        state.exit,
        Exit::Faulted {
            pc: 7,
            kind: FaultKind::PermissionDenied
        }
    );
    assert_eq!(state.memory.len(), 4);
}

proptest! {
    #[test]
    fn canonical_check_agrees(a in any::<u64>()) {
        prop_assert_eq!(is_canonical(VirtAddr(a)), oracle_is_canonical(a));
    }

    #[test]
    fn alias_check_agrees(a in any::<u64>(), upper in any::<u16>()) {
        let b = (a & 0x0000_ffff_ffff_ffff) | (u64::from(upper) << 48);
        prop_assert!(canonical_alias(VirtAddr(a), VirtAddr(b)));
        prop_assert_eq!(canonical_alias(VirtAddr(a), VirtAddr(b ^ 0x1000)), oracle_alias(a, b ^ 0x1000));
    }
}
