//! Reorder-buffer model of an out-of-order core.
//!
//! Each cycle runs four phases: complete pending line fills, retire in
//! program order per hardware thread, issue ready ops out of order, and
//! fetch in program order (round-robin between SMT threads). There is no
//! branch prediction: fetch waits at a `JNZ` until it resolves, so the only
//! transient execution is in the shadow of a faulting load.

mod lsu;
pub mod trace;
mod uop;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{AccessOutcome, Cache, CacheConfig};
use crate::isa::{Instruction, Operand, Program, Reg, NUM_REGS};
use crate::vmem::{
    Asid, FlushScope, PageTable, PhysAddr, Tlb, TlbEntry, TranslationFault, VirtAddr,
};

pub use trace::{write_cache_csv, write_jsonl, ArchFault, CacheEvent, TraceEvent, TraceRecord};
pub use uop::{DataSource, FaultKind, LoadQueueEntry, MicroOp, StoreQueueEntry, UopState};

pub const FETCH_WIDTH: usize = 4;
pub const ISSUE_WIDTH: usize = 4;
pub const RETIRE_WIDTH: usize = 4;

/// Where the load datapath enforces checks before handing out data. Every
/// check is always enforced at retirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// AMD Zen+/Zen2: permission checked at the datapath, canonicality
    /// only at retirement.
    Zen,
    /// MDS-resistant Intel: both checked at the datapath.
    MdsResistant,
    /// Meltdown-era Intel: neither checked at the datapath.
    LegacyIntel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatapathChecks {
    pub permission: bool,
    pub canonical: bool,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Zen, Preset::MdsResistant, Preset::LegacyIntel];

    pub fn datapath_checks(self) -> DatapathChecks {
        match self {
            Preset::Zen => DatapathChecks {
                permission: true,
                canonical: false,
            },
            Preset::MdsResistant => DatapathChecks {
                permission: true,
                canonical: true,
            },
            Preset::LegacyIntel => DatapathChecks {
                permission: false,
                canonical: false,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Zen => "zen",
            Preset::MdsResistant => "mds_resistant",
            Preset::LegacyIntel => "legacy_intel",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (zen, mds_resistant, legacy_intel)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuConfig {
    pub preset: Preset,
    pub rob_size: usize,
    /// Cycles from a faulting load's issue to its retirement.
    pub window_cycles: u64,
    /// Hardware threads, 1 or 2.
    pub smt_contexts: usize,
    pub seed: u64,
    pub tlb_entries: usize,
    pub cache: CacheConfig,
    /// Upper bound on cycles per [`CoreState::run`].
    pub max_cycles: u64,
}

impl Default for CpuConfig {
    fn default() -> Self {
        CpuConfig {
            preset: Preset::Zen,
            rob_size: 64,
            window_cycles: 100,
            smt_contexts: 1,
            seed: 0,
            tlb_entries: crate::vmem::DEFAULT_TLB_ENTRIES,
            cache: CacheConfig::default(),
            max_cycles: 1_000_000,
        }
    }
}

impl CpuConfig {
    pub fn with_preset(preset: Preset) -> Self {
        CpuConfig {
            preset,
            ..CpuConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no halt within {0} cycles")]
    CycleBudgetExceeded(u64),
    #[error("hardware thread {0} does not exist")]
    NoSuchThread(usize),
    #[error("invalid core configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadStatus {
    Running,
    Halted,
    Faulted,
}

#[derive(Debug, Clone)]
struct HwThread {
    program: Program,
    pc: usize,
    regs: [u64; NUM_REGS],
    asid: Asid,
    status: ThreadStatus,
    fetch_ended: bool,
    /// Fetch waits for this JNZ to resolve.
    blocked_on: Option<u64>,
}

impl HwThread {
    fn idle() -> Self {
        HwThread {
            program: Program::default(),
            pc: 0,
            regs: [0; NUM_REGS],
            asid: 0,
            status: ThreadStatus::Halted,
            fetch_ended: true,
            blocked_on: None,
        }
    }
}

pub(crate) enum Issue {
    /// Operands or ordering not satisfied yet.
    NotReady,
    /// Attempted; retry next cycle (TLB fill or store-forwarding stall).
    Replay,
    Done,
}

/// Full simulator state: core, TLB, L1D and physical memory.
#[derive(Debug, Clone)]
pub struct CoreState {
    config: CpuConfig,
    cycle: u64,
    next_seq: u64,
    threads: Vec<HwThread>,
    rob: Vec<MicroOp>,
    sq: Vec<StoreQueueEntry>,
    lq: Vec<LoadQueueEntry>,
    tlb: Tlb,
    page_table: PageTable,
    cache: Cache,
    trace: Vec<TraceRecord>,
    faults: Vec<ArchFault>,
    cache_log: Option<Vec<CacheEvent>>,
    fetch_turn: usize,
}

impl CoreState {
    pub fn new(config: CpuConfig, page_table: PageTable) -> Result<Self, SimError> {
        if !(1..=2).contains(&config.smt_contexts) {
            return Err(SimError::Config(format!(
                "smt_contexts = {}, expected 1 or 2",
                config.smt_contexts
            )));
        }
        if config.window_cycles == 0 || config.rob_size == 0 || config.tlb_entries == 0 {
            return Err(SimError::Config(
                "window_cycles, rob_size and tlb_entries must be at least 1".into(),
            ));
        }
        Ok(CoreState {
            cycle: 0,
            next_seq: 0,
            threads: (0..config.smt_contexts).map(|_| HwThread::idle()).collect(),
            rob: Vec::with_capacity(config.rob_size),
            sq: Vec::new(),
            lq: Vec::new(),
            tlb: Tlb::new(config.tlb_entries),
            cache: Cache::new(config.cache, config.seed),
            page_table,
            trace: Vec::new(),
            faults: Vec::new(),
            cache_log: None,
            fetch_turn: 0,
            config,
        })
    }

    /// Points `thread` at `program` with zeroed registers, running in `asid`.
    /// Caches, TLB and memory are kept.
    pub fn load_program(
        &mut self,
        thread: usize,
        program: Program,
        asid: Asid,
    ) -> Result<(), SimError> {
        let t = self
            .threads
            .get_mut(thread)
            .ok_or(SimError::NoSuchThread(thread))?;
        self.rob.retain(|op| op.thread != thread);
        self.sq.retain(|e| e.thread != thread);
        self.lq.retain(|e| e.thread != thread);
        *t = HwThread {
            pc: program.entry,
            program,
            regs: [0; NUM_REGS],
            asid,
            status: ThreadStatus::Running,
            fetch_ended: false,
            blocked_on: None,
        };
        Ok(())
    }

    pub fn config(&self) -> &CpuConfig {
        &self.config
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Charges cycles spent outside the core (harness probes and flushes).
    pub fn advance_clock(&mut self, cycles: u64) {
        self.cycle += cycles;
    }

    pub fn is_halted(&self) -> bool {
        self.threads
            .iter()
            .all(|t| t.status != ThreadStatus::Running)
    }

    pub fn thread_status(&self, thread: usize) -> ThreadStatus {
        self.threads[thread].status
    }

    pub fn regs(&self, thread: usize) -> &[u64; NUM_REGS] {
        &self.threads[thread].regs
    }

    pub fn thread_asid(&self, thread: usize) -> Asid {
        self.threads[thread].asid
    }

    pub fn rob(&self) -> &[MicroOp] {
        &self.rob
    }

    pub fn store_queue(&self) -> &[StoreQueueEntry] {
        &self.sq
    }

    pub fn load_queue(&self) -> &[LoadQueueEntry] {
        &self.lq
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn tlb_mut(&mut self) -> &mut Tlb {
        &mut self.tlb
    }

    /// Page walk for `vaddr` in `asid` and TLB insertion of the result.
    pub fn tlb_fill(&mut self, asid: Asid, vaddr: VirtAddr) -> Result<TlbEntry, TranslationFault> {
        self.tlb.fill(asid, vaddr, &self.page_table)
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut Cache {
        &mut self.cache
    }

    pub fn page_table(&self) -> &PageTable {
        &self.page_table
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn faults(&self) -> &[ArchFault] {
        &self.faults
    }

    pub fn take_faults(&mut self) -> Vec<ArchFault> {
        std::mem::take(&mut self.faults)
    }

    pub fn record_cache_events(&mut self, on: bool) {
        self.cache_log = on.then(Vec::new);
    }

    pub fn cache_events(&self) -> &[CacheEvent] {
        self.cache_log.as_deref().unwrap_or(&[])
    }

    /// Architectural translation through the page table.
    pub fn translate(&self, asid: Asid, vaddr: VirtAddr) -> Result<PhysAddr, TranslationFault> {
        self.page_table.translate(asid, vaddr).map(|(p, _)| p)
    }

    /// Cache access on behalf of the core or a harness, logged if enabled.
    pub fn cache_access(&mut self, paddr: PhysAddr, write: Option<&[u8]>) -> AccessOutcome {
        let outcome = self.cache.access(paddr, write);
        if let Some(log) = &mut self.cache_log {
            log.push(CacheEvent {
                cycle: self.cycle,
                paddr,
                hit: outcome.hit,
            });
        }
        outcome
    }

    /// Moves `thread` to address space `to`, dropping the outgoing
    /// address space's TLB entries. Switching to the current one is a no-op.
    pub fn context_switch(&mut self, thread: usize, to: Asid) {
        let t = &mut self.threads[thread];
        if t.asid == to {
            return;
        }
        self.tlb.flush(FlushScope::Asid(t.asid));
        t.asid = to;
    }

    /// Steps until every thread has halted or faulted.
    pub fn run(&mut self) -> Result<u64, SimError> {
        let start = self.cycle;
        while !self.is_halted() {
            if self.cycle - start >= self.config.max_cycles {
                return Err(SimError::CycleBudgetExceeded(self.config.max_cycles));
            }
            self.step();
        }
        Ok(self.cycle - start)
    }

    /// Advances one cycle.
    pub fn step(&mut self) {
        self.complete();
        self.retire_all();
        self.issue();
        self.fetch();
        self.settle_threads();
        self.cycle += 1;
    }

    fn complete(&mut self) {
        let now = self.cycle;
        let mut fills = Vec::new();
        for op in &mut self.rob {
            if op.ready_at <= now {
                if let Some(paddr) = op.pending_fill.take() {
                    fills.push(paddr);
                }
                if op.state == UopState::Executing {
                    op.state = UopState::Executed;
                }
            }
        }
        for paddr in fills {
            self.cache_access(paddr, None);
        }
    }

    fn oldest_of(&self, thread: usize) -> Option<usize> {
        self.rob.iter().position(|op| op.thread == thread)
    }

    fn retire_all(&mut self) {
        for thread in 0..self.threads.len() {
            for _ in 0..RETIRE_WIDTH {
                match self.oldest_of(thread) {
                    Some(idx) if self.rob[idx].is_done(self.cycle) => self.retire(idx),
                    _ => break,
                }
            }
        }
    }

    /// Full 64-bit checks against the page table.
    fn architectural_fault(&self, op: &MicroOp) -> Option<FaultKind> {
        let vaddr = op.vaddr?;
        let asid = op.asid?;
        let mapping = match self.page_table.translate(asid, vaddr) {
            Err(TranslationFault::NonCanonical) => return Some(FaultKind::NonCanonical),
            Err(TranslationFault::PageNotMapped) => return Some(FaultKind::PageNotMapped),
            Ok((_, m)) => m,
        };
        match op.instr {
            Instruction::Ld { .. } if !mapping.user_accessible => Some(FaultKind::PermissionDenied),
            Instruction::St { .. } if !(mapping.user_accessible && mapping.writable) => {
                Some(FaultKind::PermissionDenied)
            }
            _ => None,
        }
    }

    fn retire(&mut self, idx: usize) {
        let now = self.cycle;
        let mut op = self.rob.remove(idx);
        let thread = op.thread;
        let fault = self.architectural_fault(&op);
        debug_assert_eq!(
            fault, op.fault_kind,
            "datapath and retirement disagree: {op:?}"
        );
        if let Some(kind) = fault {
            op.fault_kind = Some(kind);
            self.trace
                .push(TraceRecord::of(&op, now, TraceEvent::Faulted));
            self.faults.push(ArchFault {
                cycle: now,
                thread,
                seq: op.seq,
                pc: op.pc,
                opcode: op.instr.opcode().mnemonic(),
                vaddr: op.vaddr.map(|v| v.to_string()),
                kind,
            });
            self.drop_queues(op.seq);
            self.squash_younger(thread, op.seq);
            let t = &mut self.threads[thread];
            t.status = ThreadStatus::Faulted;
            t.fetch_ended = true;
            t.blocked_on = None;
            return;
        }

        if let (Some(dst), Some(value)) = (op.instr.dst(), op.result) {
            self.threads[thread].regs[dst.index()] = value;
        }
        match op.instr {
            Instruction::St { width, .. } => {
                let entry = self
                    .sq
                    .iter_mut()
                    .find(|e| e.seq == op.seq)
                    .expect("store has a queue entry");
                entry.committed = true;
                let data = entry.data.to_le_bytes();
                let paddr = op.paddr.expect("committed store was translated");
                self.cache_access(paddr, Some(&data[..width.bytes() as usize]));
            }
            Instruction::Clflush { .. } => {
                let paddr = op.paddr.expect("flush was translated");
                self.cache.flush_line(paddr);
            }
            Instruction::Ctxsw { to } => self.context_switch(thread, to),
            Instruction::Hlt => {
                let t = &mut self.threads[thread];
                t.status = ThreadStatus::Halted;
                t.fetch_ended = true;
            }
            _ => {}
        }
        self.drop_queues(op.seq);
        op.state = UopState::Retired;
        self.trace
            .push(TraceRecord::of(&op, now, TraceEvent::Retired));
    }

    fn drop_queues(&mut self, seq: u64) {
        self.sq.retain(|e| e.seq != seq);
        self.lq.retain(|e| e.seq != seq);
    }

    /// Discards every op of `thread` younger than `seq`, with any fill that
    /// has not completed yet. Completed fills stay in the cache.
    fn squash_younger(&mut self, thread: usize, seq: u64) {
        let now = self.cycle;
        let mut kept = Vec::with_capacity(self.rob.len());
        for mut op in std::mem::take(&mut self.rob) {
            if op.thread == thread && op.seq > seq {
                op.state = UopState::Squashed;
                op.pending_fill = None;
                self.trace
                    .push(TraceRecord::of(&op, now, TraceEvent::Squashed));
            } else {
                kept.push(op);
            }
        }
        self.rob = kept;
        self.sq.retain(|e| !(e.thread == thread && e.seq > seq));
        self.lq.retain(|e| !(e.thread == thread && e.seq > seq));
    }

    /// Value of `reg` as seen by the op at ROB index `idx`: the youngest
    /// older in-flight producer in the same thread, else the register file.
    fn read_reg(&self, idx: usize, reg: Reg) -> Option<u64> {
        let op = &self.rob[idx];
        match self.rob[..idx]
            .iter()
            .rev()
            .find(|p| p.thread == op.thread && p.instr.dst() == Some(reg))
        {
            Some(producer) => producer.value_at(self.cycle),
            None => Some(self.threads[op.thread].regs[reg.index()]),
        }
    }

    fn read_operand(&self, idx: usize, operand: Operand) -> Option<u64> {
        match operand {
            Operand::Reg(r) => self.read_reg(idx, r),
            Operand::Imm(v) => Some(v),
        }
    }

    fn is_oldest_in_thread(&self, idx: usize) -> bool {
        let thread = self.rob[idx].thread;
        !self.rob[..idx].iter().any(|op| op.thread == thread)
    }

    fn behind_fence(&self, idx: usize) -> bool {
        let thread = self.rob[idx].thread;
        self.rob[..idx].iter().any(|op| {
            op.thread == thread
                && matches!(op.instr, Instruction::Lfence | Instruction::Ctxsw { .. })
        })
    }

    fn finish_simple(&mut self, idx: usize, result: Option<u64>) {
        let now = self.cycle;
        let asid = self.threads[self.rob[idx].thread].asid;
        let op = &mut self.rob[idx];
        op.asid = Some(asid);
        op.issued_at = Some(now);
        op.result = result;
        op.ready_at = now + 1;
        op.retire_at = now + 1;
        op.state = UopState::Executing;
    }

    fn try_issue(&mut self, idx: usize) -> Issue {
        if self.behind_fence(idx) {
            return Issue::NotReady;
        }
        let instr = self.rob[idx].instr;
        match instr {
            Instruction::Lfence | Instruction::Ctxsw { .. } => {
                if !self.is_oldest_in_thread(idx) {
                    return Issue::NotReady;
                }
                self.finish_simple(idx, None);
            }
            Instruction::Hlt => self.finish_simple(idx, None),
            Instruction::Ldi { imm, .. } => self.finish_simple(idx, Some(imm)),
            Instruction::Rdt { .. } => self.finish_simple(idx, Some(self.cycle)),
            Instruction::Alu { op, dst, src } => {
                let (Some(lhs), Some(rhs)) = (self.read_reg(idx, dst), self.read_operand(idx, src))
                else {
                    return Issue::NotReady;
                };
                self.finish_simple(idx, Some(op.apply(lhs, rhs)));
            }
            Instruction::Jnz { cond, target } => {
                let Some(value) = self.read_reg(idx, cond) else {
                    return Issue::NotReady;
                };
                self.finish_simple(idx, None);
                let op = &self.rob[idx];
                let (seq, pc) = (op.seq, op.pc);
                let t = &mut self.threads[op.thread];
                if t.blocked_on == Some(seq) {
                    t.pc = if value != 0 { target } else { pc + 1 };
                    t.blocked_on = None;
                }
            }
            Instruction::Ld { mem, width, .. } => {
                let Some(base) = self.read_reg(idx, mem.base) else {
                    return Issue::NotReady;
                };
                return self.execute_load(idx, VirtAddr(mem.effective(base)), width);
            }
            Instruction::St { mem, src, width } => {
                let (Some(base), Some(value)) =
                    (self.read_reg(idx, mem.base), self.read_operand(idx, src))
                else {
                    return Issue::NotReady;
                };
                return self.execute_store(idx, VirtAddr(mem.effective(base)), value, width);
            }
            Instruction::Clflush { mem } => {
                let Some(base) = self.read_reg(idx, mem.base) else {
                    return Issue::NotReady;
                };
                return self.execute_flush(idx, VirtAddr(mem.effective(base)));
            }
        }
        Issue::Done
    }

    fn issue(&mut self) {
        let mut slots = ISSUE_WIDTH;
        let mut idx = 0;
        while idx < self.rob.len() && slots > 0 {
            if self.rob[idx].state == UopState::Waiting {
                match self.try_issue(idx) {
                    Issue::NotReady => {}
                    Issue::Replay | Issue::Done => slots -= 1,
                }
            }
            idx += 1;
        }
    }

    fn fetch(&mut self) {
        let n = self.threads.len();
        let Some(thread) = (0..n).map(|k| (self.fetch_turn + k) % n).find(|&t| {
            let t = &self.threads[t];
            t.status == ThreadStatus::Running && !t.fetch_ended && t.blocked_on.is_none()
        }) else {
            return;
        };
        self.fetch_turn = (thread + 1) % n;
        for _ in 0..FETCH_WIDTH {
            if self.rob.len() >= self.config.rob_size {
                break;
            }
            let t = &mut self.threads[thread];
            let Some(&instr) = t.program.instructions.get(t.pc) else {
                t.fetch_ended = true;
                break;
            };
            let seq = self.next_seq;
            self.next_seq += 1;
            let pc = t.pc;
            match instr {
                Instruction::Jnz { .. } => t.blocked_on = Some(seq),
                Instruction::Hlt => t.fetch_ended = true,
                _ => t.pc += 1,
            }
            let stop = t.blocked_on.is_some() || t.fetch_ended;
            match instr {
                Instruction::St { width, .. } => self.sq.push(StoreQueueEntry {
                    seq,
                    thread,
                    width,
                    vaddr: None,
                    paddr: None,
                    data: 0,
                    committed: false,
                    known_at: None,
                }),
                Instruction::Ld { .. } => self.lq.push(LoadQueueEntry {
                    seq,
                    thread,
                    vaddr: None,
                    data_source: None,
                }),
                _ => {}
            }
            self.rob.push(MicroOp::new(seq, thread, pc, instr));
            if stop {
                break;
            }
        }
    }

    fn settle_threads(&mut self) {
        for (i, t) in self.threads.iter_mut().enumerate() {
            if t.status == ThreadStatus::Running
                && t.fetch_ended
                && !self.rob.iter().any(|op| op.thread == i)
            {
                t.status = ThreadStatus::Halted;
            }
        }
    }
}
