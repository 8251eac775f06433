use serde::{Deserialize, Serialize};

use crate::isa::{Instruction, Width};
use crate::vmem::{Asid, PhysAddr, VirtAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// General-protection analog.
    NonCanonical,
    PageNotMapped,
    PermissionDenied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    L1d,
    StoreForward {
        store_seq: u64,
    },
    /// Line fill after an L1D miss; only loads that pass every check get one.
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UopState {
    Waiting,
    Executing,
    Executed,
    Faulting,
    Squashed,
    Retired,
}

#[derive(Debug, Clone)]
pub struct MicroOp {
    pub seq: u64,
    pub thread: usize,
    pub pc: usize,
    pub instr: Instruction,
    pub state: UopState,
    /// Address space the op executed in.
    pub asid: Option<Asid>,
    pub issued_at: Option<u64>,
    /// Cycle from which `result` is visible to dependents.
    pub ready_at: u64,
    /// Earliest retirement cycle.
    pub retire_at: u64,
    pub result: Option<u64>,
    pub transient_data_valid: bool,
    pub fault_kind: Option<FaultKind>,
    pub vaddr: Option<VirtAddr>,
    pub paddr: Option<PhysAddr>,
    pub data_source: Option<DataSource>,
    pub(crate) pending_fill: Option<PhysAddr>,
}

impl MicroOp {
    pub(crate) fn new(seq: u64, thread: usize, pc: usize, instr: Instruction) -> Self {
        MicroOp {
            seq,
            thread,
            pc,
            instr,
            state: UopState::Waiting,
            asid: None,
            issued_at: None,
            ready_at: u64::MAX,
            retire_at: u64::MAX,
            result: None,
            transient_data_valid: false,
            fault_kind: None,
            vaddr: None,
            paddr: None,
            data_source: None,
            pending_fill: None,
        }
    }

    pub fn is_done(&self, now: u64) -> bool {
        matches!(
            self.state,
            UopState::Executing | UopState::Executed | UopState::Faulting
        ) && self.retire_at <= now
    }

    pub fn value_at(&self, now: u64) -> Option<u64> {
        if self.ready_at <= now {
            self.result
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreQueueEntry {
    pub seq: u64,
    pub thread: usize,
    pub width: Width,
    pub vaddr: Option<VirtAddr>,
    /// Set when the TLB translated a canonical address.
    pub paddr: Option<PhysAddr>,
    pub data: u64,
    pub committed: bool,
    /// Cycle from which the address is visible to younger loads.
    pub(crate) known_at: Option<u64>,
}

impl StoreQueueEntry {
    pub fn address_known(&self, now: u64) -> bool {
        self.known_at.is_some_and(|at| at <= now)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadQueueEntry {
    pub seq: u64,
    pub thread: usize,
    pub vaddr: Option<VirtAddr>,
    pub data_source: Option<DataSource>,
}
