//! Exhaustive check of the load datapath gate.
//!
//! Each of the 16 cells runs a real program: an L1D-missing load that holds
//! back retirement, a store, and a non-canonical alias load of page `T`.
//! The cell's four conditions are set up as follows.
//!
//! * TLB hit: `T`'s entry is present when the alias load executes. For
//!   misses the harness flushes the whole TLB right after the store has
//!   executed.
//! * Permission: `T` is a user page, or a supervisor page.
//! * L1D: `T`'s line is resident, or flushed.
//! * SQ match: the store writes the loaded bytes of `T`, or a different
//!   page at a different offset.
//!
//! Flow is read from the alias load's trace record.

use serde::Serialize;

use crate::isa::listings::{ADDR1, NONCANONICAL_MASK};
use crate::isa::parse_program;
use crate::pipeline::{CoreState, CpuConfig, DataSource, Preset, SimError};
use crate::vmem::{FlushScope, Mapping, PageTable, VirtAddr, PAGE_SHIFT};

const T: u64 = ADDR1;
const OTHER: u64 = 0x0000_1000_0020_0000;
const SLOW: u64 = 0x0000_3000_0000_0000;
const LOAD_OFF: u64 = 0x8;
const OTHER_OFF: u64 = 0x48;
const STORED: u64 = 0x2a;
const IN_MEMORY: u64 = 0x5a;
/// Program counter of the alias load.
const ALIAS_PC: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TruthRow {
    pub tlb_hit: bool,
    pub permission_ok: bool,
    pub l1d_resident: bool,
    pub sq_match: bool,
    pub flowed: bool,
    pub source: Option<DataSource>,
    pub value: Option<u64>,
    pub predicted: bool,
}

/// Transient data reaches a load iff the TLB hits, the permission check
/// passes, and either the line is in L1D or a qualified store forwards.
/// A store qualifies only if its own line is L1D-resident.
pub fn gate_predicate(
    tlb_hit: bool,
    permission_ok: bool,
    l1d_resident: bool,
    sq_match: bool,
    store_line_resident: bool,
) -> bool {
    tlb_hit && permission_ok && (l1d_resident || (sq_match && store_line_resident))
}

/// [`gate_predicate`] as each preset applies it: `legacy_intel` skips the
/// permission check and `mds_resistant` never forwards a faulting load.
pub fn preset_gate(
    preset: Preset,
    tlb_hit: bool,
    permission_ok: bool,
    l1d_resident: bool,
    sq_match: bool,
    store_line_resident: bool,
) -> bool {
    match preset {
        Preset::Zen => gate_predicate(
            tlb_hit,
            permission_ok,
            l1d_resident,
            sq_match,
            store_line_resident,
        ),
        Preset::LegacyIntel => {
            gate_predicate(tlb_hit, true, l1d_resident, sq_match, store_line_resident)
        }
        Preset::MdsResistant => false,
    }
}

fn page_table(permission_ok: bool) -> PageTable {
    let mut pt = PageTable::new();
    let map = |pt: &mut PageTable, virt, phys_page, user_accessible| {
        let m = Mapping {
            phys_page,
            user_accessible,
            writable: true,
        };
        pt.map(0, VirtAddr(virt), m).expect("fixed layout");
    };
    map(&mut pt, T, 0x100, permission_ok);
    map(&mut pt, OTHER, 0x110, true);
    map(&mut pt, SLOW, 0x200, true);
    pt
}

fn cell(
    config: &CpuConfig,
    tlb_hit: bool,
    permission_ok: bool,
    l1d_resident: bool,
    sq_match: bool,
) -> Result<TruthRow, SimError> {
    let mut core = CoreState::new(config.clone(), page_table(permission_ok))?;
    let t_paddr = (0x100 << PAGE_SHIFT) + LOAD_OFF;
    core.cache_mut().memory_mut().write(t_paddr, IN_MEMORY, 1);
    if l1d_resident {
        core.cache_access(t_paddr, None);
    }
    core.cache_access(0x110 << PAGE_SHIFT, None);
    if tlb_hit {
        core.tlb_fill(0, VirtAddr(T)).expect("T is mapped");
    }
    let (store_base, store_off) = if sq_match {
        (T, LOAD_OFF)
    } else {
        (OTHER, OTHER_OFF)
    };
    let source = format!(
        "LDI r7, {SLOW:#x}\nLD r8, [r7]\nLDI r1, {store_base:#x}\nST.1 [r1+{store_off:#x}], {STORED:#x}\n\
         LDI r3, {:#x}\nLD.1 r4, [r3+{LOAD_OFF:#x}]\nHLT",
        T | NONCANONICAL_MASK
    );
    core.load_program(0, parse_program(&source).expect("fixed program"), 0)?;

    let budget = config.max_cycles;
    let mut flushed = false;
    while !core.is_halted() {
        if core.cycle() >= budget {
            return Err(SimError::CycleBudgetExceeded(budget));
        }
        core.step();
        if !tlb_hit && !flushed && core.store_queue().iter().any(|e| e.vaddr.is_some()) {
            core.tlb_mut().flush(FlushScope::All);
            flushed = true;
        }
    }
    let record = core
        .trace()
        .iter()
        .find(|r| r.pc == ALIAS_PC)
        .expect("alias load leaves a trace record");
    Ok(TruthRow {
        tlb_hit,
        permission_ok,
        l1d_resident,
        sq_match,
        flowed: record.transient_data_valid,
        source: record.data_source,
        value: record.result,
        predicted: preset_gate(
            config.preset,
            tlb_hit,
            permission_ok,
            l1d_resident,
            sq_match,
            l1d_resident,
        ),
    })
}

/// All 16 combinations, in binary order of (TLB, permission, L1D, SQ).
pub fn forwarding_truth_table(config: &CpuConfig) -> Result<Vec<TruthRow>, SimError> {
    let mut rows = Vec::with_capacity(16);
    for bits in 0..16u8 {
        let bit = |i: u8| bits & (8 >> i) != 0;
        rows.push(cell(config, bit(0), bit(1), bit(2), bit(3))?);
    }
    Ok(rows)
}
