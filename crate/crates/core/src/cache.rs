//! Physically tagged, set-associative L1D over a sparse physical memory.
//!
//! Write-through and write-allocate: a resident line always holds exactly
//! what backing memory holds, so line contents are never stored separately.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vmem::{PhysAddr, PAGE_SHIFT, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub sets: usize,
    pub ways: usize,
    pub line_size: u64,
    pub hit_latency: u64,
    pub miss_latency: u64,
    /// Uniform latency jitter of `±jitter` cycles; zero is noiseless.
    pub jitter: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            sets: 64,
            ways: 8,
            line_size: 64,
            hit_latency: 4,
            miss_latency: 50,
            jitter: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheConfigError {
    #[error("cache.sets = {0} is not a power of two")]
    Sets(usize),
    #[error("cache.ways = {0} is not a power of two")]
    Ways(usize),
    #[error("cache.line_size = {0}, only 64-byte lines are supported")]
    LineSize(u64),
    #[error("cache.miss_latency ({miss}) must exceed cache.hit_latency ({hit})")]
    Latency { hit: u64, miss: u64 },
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheConfigError> {
        if !self.sets.is_power_of_two() {
            return Err(CacheConfigError::Sets(self.sets));
        }
        if !self.ways.is_power_of_two() {
            return Err(CacheConfigError::Ways(self.ways));
        }
        if self.line_size != 64 {
            return Err(CacheConfigError::LineSize(self.line_size));
        }
        if self.miss_latency <= self.hit_latency {
            return Err(CacheConfigError::Latency {
                hit: self.hit_latency,
                miss: self.miss_latency,
            });
        }
        Ok(())
    }
}

/// Byte-addressable physical memory; untouched bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhysMemory {
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl PhysMemory {
    pub fn byte(&self, paddr: PhysAddr) -> u8 {
        self.pages
            .get(&(paddr >> PAGE_SHIFT))
            .map_or(0, |p| p[(paddr & (PAGE_SIZE - 1)) as usize])
    }

    pub fn set_byte(&mut self, paddr: PhysAddr, value: u8) {
        let page = self
            .pages
            .entry(paddr >> PAGE_SHIFT)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[(paddr & (PAGE_SIZE - 1)) as usize] = value;
    }

    /// Little-endian read of `len` (at most 8) bytes.
    pub fn read(&self, paddr: PhysAddr, len: u64) -> u64 {
        (0..len).fold(0, |acc, i| {
            acc | u64::from(self.byte(paddr.wrapping_add(i))) << (8 * i)
        })
    }

    pub fn write(&mut self, paddr: PhysAddr, value: u64, len: u64) {
        for i in 0..len {
            self.set_byte(paddr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }

    pub fn write_bytes(&mut self, paddr: PhysAddr, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.set_byte(paddr.wrapping_add(i as u64), *b);
        }
    }

    /// Every non-zero byte, in address order.
    pub fn nonzero_bytes(&self) -> impl Iterator<Item = (PhysAddr, u8)> + '_ {
        self.pages.iter().flat_map(|(&page, bytes)| {
            bytes
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0)
                .map(move |(i, &b)| ((page << PAGE_SHIFT) + i as u64, b))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessOutcome {
    pub latency: u64,
    pub hit: bool,
}

#[derive(Debug, Clone)]
pub struct Cache {
    config: CacheConfig,
    // Line numbers per set, most recently used first; the position is the LRU rank.
    sets: Vec<Vec<u64>>,
    memory: PhysMemory,
    rng: ChaCha8Rng,
}

impl Cache {
    pub fn new(config: CacheConfig, seed: u64) -> Self {
        Cache {
            config,
            sets: vec![Vec::with_capacity(config.ways); config.sets.max(1)],
            memory: PhysMemory::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn memory(&self) -> &PhysMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut PhysMemory {
        &mut self.memory
    }

    pub fn line_of(&self, paddr: PhysAddr) -> u64 {
        paddr / self.config.line_size
    }

    fn set_of(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    /// One latency draw for a hit or a miss, jittered when configured.
    pub fn sample_latency(&mut self, hit: bool) -> u64 {
        let base = if hit {
            self.config.hit_latency
        } else {
            self.config.miss_latency
        };
        let j = self.config.jitter;
        if j == 0 {
            return base;
        }
        let delta = self.rng.random_range(0..=2 * j) as i64 - j as i64;
        (base as i64 + delta).max(1) as u64
    }

    /// Reads or writes (`write = Some(bytes)`) at `paddr`. A miss allocates
    /// the line, evicting the set's least recently used way.
    pub fn access(&mut self, paddr: PhysAddr, write: Option<&[u8]>) -> AccessOutcome {
        let line = self.line_of(paddr);
        let set_idx = self.set_of(line);
        let ways = self.config.ways;
        let set = &mut self.sets[set_idx];
        let hit = match set.iter().position(|&l| l == line) {
            Some(pos) => {
                set.remove(pos);
                true
            }
            None => {
                if set.len() >= ways {
                    set.pop();
                }
                false
            }
        };
        set.insert(0, line);
        if let Some(bytes) = write {
            self.memory.write_bytes(paddr, bytes);
        }
        AccessOutcome {
            latency: self.sample_latency(hit),
            hit,
        }
    }

    pub fn flush_line(&mut self, paddr: PhysAddr) {
        let line = self.line_of(paddr);
        let set_idx = self.set_of(line);
        self.sets[set_idx].retain(|&l| l != line);
    }

    /// Residency probe; does not touch replacement state.
    pub fn is_resident(&self, paddr: PhysAddr) -> bool {
        let line = self.line_of(paddr);
        self.sets[self.set_of(line)].contains(&line)
    }

    pub fn flush_all(&mut self) {
        for set in &mut self.sets {
            set.clear();
        }
    }

    pub fn resident_lines(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}
