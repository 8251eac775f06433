//! Load/store unit: the datapath gate in front of every load.
//!
//! A load that will fault gets exactly one attempt at data. It receives
//! some only if the TLB hits on bits `[47:12]`, the preset's datapath
//! checks pass, and either a qualifying older store or a resident L1D line
//! supplies the bytes. Everything else in this file is ordinary plumbing
//! that keeps legal loads architecturally correct.

use super::uop::{DataSource, FaultKind, UopState};
use super::{CoreState, Issue};
use crate::isa::Width;
use crate::vmem::{PhysAddr, TranslationFault, VirtAddr};

/// Outcome of searching the store queue for a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StoreMatch {
    None,
    Forward {
        store_seq: u64,
        value: u64,
    },
    /// An older store overlaps but cannot forward; the load must wait for it.
    Blocked {
        store_seq: u64,
    },
}

fn overlaps(a_start: u64, a_len: u64, b_start: u64, b_len: u64) -> bool {
    a_start < b_start + b_len && b_start < a_start + a_len
}

impl CoreState {
    /// Store-to-load forwarding. The candidate is the youngest older
    /// uncommitted store of the same thread whose bytes overlap the load's
    /// in page-offset bits `[11:0]` (or physically). It forwards only if
    /// it was translated, lies in the load's page (bits `[47:12]`), covers
    /// every loaded byte, and its line is resident in L1D.
    pub(crate) fn store_match(
        &self,
        thread: usize,
        load_seq: u64,
        vaddr: VirtAddr,
        paddr: Option<PhysAddr>,
        width: Width,
    ) -> StoreMatch {
        let load_off = vaddr.page_offset();
        let len = width.bytes();
        let candidate = self
            .sq
            .iter()
            .filter(|s| s.thread == thread && s.seq < load_seq && !s.committed)
            .filter(|s| {
                let Some(svaddr) = s.vaddr else { return false };
                let low_bits = overlaps(svaddr.page_offset(), s.width.bytes(), load_off, len);
                let physical = matches!((s.paddr, paddr), (Some(sp), Some(lp))
                    if overlaps(sp, s.width.bytes(), lp, len));
                low_bits || physical
            })
            .max_by_key(|s| s.seq);
        let Some(store) = candidate else {
            return StoreMatch::None;
        };
        let svaddr = store.vaddr.expect("filtered on address");
        let store_off = svaddr.page_offset();
        let qualified = store.paddr.is_some_and(|sp| self.cache.is_resident(sp))
            && svaddr.page_tag() == vaddr.page_tag()
            && store_off <= load_off
            && load_off + len <= store_off + store.width.bytes();
        if qualified {
            let shift = 8 * (load_off - store_off);
            StoreMatch::Forward {
                store_seq: store.seq,
                value: (store.data >> shift) & width.mask(),
            }
        } else {
            StoreMatch::Blocked {
                store_seq: store.seq,
            }
        }
    }

    fn older_store_address_pending(&self, idx: usize) -> bool {
        let op = &self.rob[idx];
        self.sq
            .iter()
            .any(|s| s.thread == op.thread && s.seq < op.seq && !s.address_known(self.cycle))
    }

    fn begin_mem(&mut self, idx: usize, vaddr: VirtAddr) {
        let asid = self.threads[self.rob[idx].thread].asid;
        let op = &mut self.rob[idx];
        op.asid = Some(asid);
        op.vaddr = Some(vaddr);
        op.issued_at = Some(self.cycle);
    }

    fn fill_or_fault(&mut self, idx: usize, vaddr: VirtAddr) -> Result<(), FaultKind> {
        let asid = self.rob[idx].asid.expect("begin_mem ran");
        match self.tlb.fill(asid, vaddr, &self.page_table) {
            Ok(_) => Ok(()),
            Err(TranslationFault::NonCanonical) => Err(FaultKind::NonCanonical),
            Err(TranslationFault::PageNotMapped) => Err(FaultKind::PageNotMapped),
        }
    }

    fn finish_load(
        &mut self,
        idx: usize,
        fault: Option<FaultKind>,
        data: Option<(u64, DataSource, u64)>,
        paddr: Option<PhysAddr>,
    ) -> Issue {
        let now = self.cycle;
        let window = self.config.window_cycles;
        let op = &mut self.rob[idx];
        op.fault_kind = fault;
        op.paddr = paddr;
        match data {
            Some((value, source, latency)) => {
                op.result = Some(value);
                op.data_source = Some(source);
                op.ready_at = now + latency;
            }
            None => op.ready_at = u64::MAX,
        }
        op.transient_data_valid = fault.is_some() && op.result.is_some();
        if fault.is_some() {
            op.state = UopState::Faulting;
            op.retire_at = now + window;
        } else {
            op.state = UopState::Executing;
            op.retire_at = op.ready_at;
        }
        let (seq, source) = (op.seq, op.data_source);
        let vaddr = op.vaddr;
        if let Some(entry) = self.lq.iter_mut().find(|e| e.seq == seq) {
            entry.vaddr = vaddr;
            entry.data_source = source;
        }
        Issue::Done
    }

    pub(crate) fn execute_load(&mut self, idx: usize, vaddr: VirtAddr, width: Width) -> Issue {
        if self.older_store_address_pending(idx) {
            return Issue::NotReady;
        }
        self.begin_mem(idx, vaddr);
        let asid = self.rob[idx].asid.expect("set by begin_mem");
        let canonical = vaddr.is_canonical();

        // 1. TLB, compared on bits [47:12] only.
        let Some(entry) = self.tlb.lookup(asid, vaddr) else {
            if !canonical {
                return self.finish_load(idx, Some(FaultKind::NonCanonical), None, None);
            }
            return match self.fill_or_fault(idx, vaddr) {
                Ok(()) => Issue::Replay,
                Err(kind) => self.finish_load(idx, Some(kind), None, None),
            };
        };
        let paddr = entry.phys_addr(vaddr);
        let fault = if !canonical {
            Some(FaultKind::NonCanonical)
        } else if !entry.user_accessible {
            Some(FaultKind::PermissionDenied)
        } else {
            None
        };

        // 2-3. Datapath checks that depend on the preset.
        let checks = self.config.preset.datapath_checks();
        if (checks.permission && !entry.user_accessible) || (checks.canonical && !canonical) {
            return self.finish_load(idx, fault, None, Some(paddr));
        }

        // 4. Data source: store queue first, then L1D.
        let (thread, seq) = (self.rob[idx].thread, self.rob[idx].seq);
        match self.store_match(thread, seq, vaddr, Some(paddr), width) {
            StoreMatch::Forward { store_seq, value } => {
                let latency = self.cache.sample_latency(true);
                self.finish_load(
                    idx,
                    fault,
                    Some((value, DataSource::StoreForward { store_seq }, latency)),
                    Some(paddr),
                )
            }
            StoreMatch::Blocked { .. } if fault.is_some() => {
                self.finish_load(idx, fault, None, Some(paddr))
            }
            StoreMatch::Blocked { .. } => Issue::Replay,
            StoreMatch::None => {
                if self.cache.is_resident(paddr) {
                    let outcome = self.cache_access(paddr, None);
                    let value = self.cache.memory().read(paddr, width.bytes());
                    self.finish_load(
                        idx,
                        fault,
                        Some((value, DataSource::L1d, outcome.latency)),
                        Some(paddr),
                    )
                } else if fault.is_some() {
                    // No fill-then-forward inside the transient window.
                    self.finish_load(idx, fault, None, Some(paddr))
                } else {
                    let latency = self.cache.sample_latency(false);
                    let value = self.cache.memory().read(paddr, width.bytes());
                    self.rob[idx].pending_fill = Some(paddr);
                    self.finish_load(
                        idx,
                        None,
                        Some((value, DataSource::Memory, latency)),
                        Some(paddr),
                    )
                }
            }
        }
    }

    pub(crate) fn execute_store(
        &mut self,
        idx: usize,
        vaddr: VirtAddr,
        value: u64,
        width: Width,
    ) -> Issue {
        self.begin_mem(idx, vaddr);
        let asid = self.rob[idx].asid.expect("set by begin_mem");
        let (fault, paddr) = if !vaddr.is_canonical() {
            // Faults at retirement and never forwards.
            (Some(FaultKind::NonCanonical), None)
        } else {
            match self.tlb.lookup(asid, vaddr) {
                Some(e) => {
                    let denied = !(e.user_accessible && e.writable);
                    (
                        denied.then_some(FaultKind::PermissionDenied),
                        Some(e.phys_addr(vaddr)),
                    )
                }
                None => match self.fill_or_fault(idx, vaddr) {
                    Ok(()) => return Issue::Replay,
                    Err(kind) => (Some(kind), None),
                },
            }
        };
        let now = self.cycle;
        let op = &mut self.rob[idx];
        op.fault_kind = fault;
        op.paddr = paddr;
        op.ready_at = now + 1;
        op.retire_at = now + 1;
        op.state = if fault.is_some() {
            UopState::Faulting
        } else {
            UopState::Executing
        };
        let seq = op.seq;
        let entry = self
            .sq
            .iter_mut()
            .find(|e| e.seq == seq)
            .expect("store has a queue entry");
        entry.vaddr = Some(vaddr);
        entry.paddr = paddr;
        entry.data = value & width.mask();
        entry.known_at = Some(now + 1);
        Issue::Done
    }

    pub(crate) fn execute_flush(&mut self, idx: usize, vaddr: VirtAddr) -> Issue {
        self.begin_mem(idx, vaddr);
        let asid = self.rob[idx].asid.expect("set by begin_mem");
        let (fault, paddr) = match self.tlb.lookup(asid, vaddr) {
            Some(_) if !vaddr.is_canonical() => (Some(FaultKind::NonCanonical), None),
            Some(e) => (None, Some(e.phys_addr(vaddr))),
            None => match self.fill_or_fault(idx, vaddr) {
                Ok(()) => return Issue::Replay,
                Err(kind) => (Some(kind), None),
            },
        };
        let now = self.cycle;
        let op = &mut self.rob[idx];
        op.fault_kind = fault;
        op.paddr = paddr;
        op.ready_at = now + 1;
        op.retire_at = now + 1;
        op.state = if fault.is_some() {
            UopState::Faulting
        } else {
            UopState::Executing
        };
        Issue::Done
    }
}
