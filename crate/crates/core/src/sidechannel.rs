//! Flush+Reload receiver over the simulated L1D.
//!
//! The receiver runs outside the core's pipeline but charges the core's
//! clock: one cycle per flushed line and the measured latency of every
//! probe.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::pipeline::CoreState;
use crate::vmem::{Asid, PhysAddr, VirtAddr, PAGE_SIZE, PHYS_PAGES};

pub const ORACLE_SLOTS: usize = 256;
pub const ORACLE_STRIDE: u64 = PAGE_SIZE;

/// Physical line used for calibration. Scenarios never map the last page.
const SCRATCH: PhysAddr = (PHYS_PAGES - 1) * PAGE_SIZE;
const CALIBRATION_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SideChannelError {
    #[error("oracle base {0} is not a canonical page-aligned address")]
    BadOracleBase(VirtAddr),
    #[error("oracle slot {slot} at {vaddr} is not mapped in context {asid}")]
    OracleUnmapped {
        slot: usize,
        vaddr: VirtAddr,
        asid: Asid,
    },
    #[error("hit and miss latencies overlap (max hit {max_hit}, min miss {min_miss})")]
    CalibrationFailed { max_hit: u64, min_miss: u64 },
}

/// 256 probe slots, one per byte value, a page apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleArray {
    pub base: VirtAddr,
    pub stride: u64,
}

impl OracleArray {
    pub fn new(base: VirtAddr) -> Result<Self, SideChannelError> {
        if !base.is_canonical() || base.page_offset() != 0 {
            return Err(SideChannelError::BadOracleBase(base));
        }
        Ok(OracleArray {
            base,
            stride: ORACLE_STRIDE,
        })
    }

    pub fn slot(&self, index: usize) -> VirtAddr {
        VirtAddr(self.base.0.wrapping_add(index as u64 * self.stride))
    }

    /// Physical address of every slot in `asid`.
    pub fn resolve(&self, core: &CoreState, asid: Asid) -> Result<Vec<PhysAddr>, SideChannelError> {
        (0..ORACLE_SLOTS)
            .map(|slot| {
                let vaddr = self.slot(slot);
                core.translate(asid, vaddr)
                    .map_err(|_| SideChannelError::OracleUnmapped { slot, vaddr, asid })
            })
            .collect()
    }
}

/// Reload latencies of one probe pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignalHistogram {
    pub latencies: Vec<u64>,
    pub hot_slots: Vec<usize>,
    pub threshold: u64,
}

impl SignalHistogram {
    pub fn from_latencies(latencies: Vec<u64>, threshold: u64) -> Self {
        let hot_slots = latencies
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l < threshold)
            .map(|(i, _)| i)
            .collect();
        SignalHistogram {
            latencies,
            hot_slots,
            threshold,
        }
    }

    /// The single hot slot, if exactly one.
    pub fn one_hot(&self) -> Option<u8> {
        match self.hot_slots[..] {
            [slot] => Some(slot as u8),
            _ => None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,latency,is_hot\n");
        for (slot, latency) in self.latencies.iter().enumerate() {
            let hot = u8::from(*latency < self.threshold);
            let _ = writeln!(out, "{slot},{latency},{hot}");
        }
        out
    }
}

/// Evicts every oracle line. Costs one cycle per line.
pub fn flush_oracle(
    core: &mut CoreState,
    asid: Asid,
    oracle: &OracleArray,
) -> Result<(), SideChannelError> {
    for paddr in oracle.resolve(core, asid)? {
        core.cache_mut().flush_line(paddr);
    }
    core.advance_clock(ORACLE_SLOTS as u64);
    Ok(())
}

/// Times one access per slot in a seeded random order and classifies each
/// against `threshold`. Every probed line is flushed again right after it
/// is timed, so probes never evict a line that has not been measured yet.
pub fn reload_and_classify(
    core: &mut CoreState,
    asid: Asid,
    oracle: &OracleArray,
    threshold: u64,
    order_seed: u64,
) -> Result<SignalHistogram, SideChannelError> {
    let paddrs = oracle.resolve(core, asid)?;
    let mut order: Vec<usize> = (0..ORACLE_SLOTS).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    let mut latencies = vec![0; ORACLE_SLOTS];
    let mut spent = 0;
    for slot in order {
        let outcome = core.cache_access(paddrs[slot], None);
        core.cache_mut().flush_line(paddrs[slot]);
        latencies[slot] = outcome.latency;
        spent += outcome.latency;
    }
    core.advance_clock(spent);
    Ok(SignalHistogram::from_latencies(latencies, threshold))
}

/// Midpoint between the slowest hit and the fastest miss observed on a
/// scratch line.
pub fn calibrate_threshold(core: &mut CoreState) -> Result<u64, SideChannelError> {
    let mut max_hit = 0;
    let mut min_miss = u64::MAX;
    for _ in 0..CALIBRATION_SAMPLES {
        core.cache_mut().flush_line(SCRATCH);
        min_miss = min_miss.min(core.cache_mut().access(SCRATCH, None).latency);
        max_hit = max_hit.max(core.cache_mut().access(SCRATCH, None).latency);
    }
    core.cache_mut().flush_line(SCRATCH);
    if max_hit >= min_miss {
        return Err(SideChannelError::CalibrationFailed { max_hit, min_miss });
    }
    Ok((max_hit + min_miss) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub secret_estimate: Option<u8>,
    pub confidence: f64,
    pub rounds: u32,
}

/// Per-slot hit counts over several rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MajorityDecoder {
    counts: [u32; ORACLE_SLOTS],
    rounds: u32,
}

impl Default for MajorityDecoder {
    fn default() -> Self {
        MajorityDecoder {
            counts: [0; ORACLE_SLOTS],
            rounds: 0,
        }
    }
}

impl MajorityDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, histogram: &SignalHistogram) {
        for &slot in &histogram.hot_slots {
            self.counts[slot] += 1;
        }
        self.rounds += 1;
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn counts(&self) -> &[u32; ORACLE_SLOTS] {
        &self.counts
    }

    /// Slots hot in more than half of the rounds.
    pub fn majority_slots(&self) -> Vec<usize> {
        (0..ORACLE_SLOTS)
            .filter(|&s| 2 * self.counts[s] > self.rounds)
            .collect()
    }

    /// Most frequently hot slot, lowest index on ties. `None` if no slot
    /// was ever hot.
    pub fn decode(&self) -> DecodeSummary {
        let best = (0..ORACLE_SLOTS)
            .filter(|&s| self.counts[s] > 0)
            .max_by_key(|&s| (self.counts[s], std::cmp::Reverse(s)));
        let confidence = match (best, self.rounds) {
            (Some(s), r) if r > 0 => f64::from(self.counts[s]) / f64::from(r),
            _ => 0.0,
        };
        DecodeSummary {
            secret_estimate: best.map(|s| s as u8),
            confidence,
            rounds: self.rounds,
        }
    }
}
