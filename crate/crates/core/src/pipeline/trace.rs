use std::io::{self, Write};

use serde::Serialize;

use super::uop::{DataSource, FaultKind, MicroOp};
use crate::vmem::PhysAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Retired,
    Faulted,
    Squashed,
}

/// One line of the micro-op trace, written when an op leaves the ROB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub thread: usize,
    pub seq: u64,
    pub pc: usize,
    pub opcode: &'static str,
    pub event: TraceEvent,
    pub issued: Option<u64>,
    pub vaddr: Option<String>,
    pub data_source: Option<DataSource>,
    pub fault_kind: Option<FaultKind>,
    pub transient_data_valid: bool,
    pub result: Option<u64>,
}

impl TraceRecord {
    pub(crate) fn of(op: &MicroOp, cycle: u64, event: TraceEvent) -> Self {
        TraceRecord {
            cycle,
            thread: op.thread,
            seq: op.seq,
            pc: op.pc,
            opcode: op.instr.opcode().mnemonic(),
            event,
            issued: op.issued_at,
            vaddr: op.vaddr.map(|v| v.to_string()),
            data_source: op.data_source,
            fault_kind: op.fault_kind,
            transient_data_valid: op.transient_data_valid,
            result: op.result,
        }
    }
}

/// Architectural fault raised when a faulting op reaches retirement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchFault {
    pub cycle: u64,
    pub thread: usize,
    pub seq: u64,
    pub pc: usize,
    pub opcode: &'static str,
    pub vaddr: Option<String>,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheEvent {
    pub cycle: u64,
    pub paddr: PhysAddr,
    pub hit: bool,
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, records: &[T]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_cache_csv<W: Write>(mut out: W, events: &[CacheEvent]) -> io::Result<()> {
    writeln!(out, "cycle,paddr,hit")?;
    for e in events {
        writeln!(out, "{},{:#x},{}", e.cycle, e.paddr, u8::from(e.hit))?;
    }
    Ok(())
}
