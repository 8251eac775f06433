//! Virtual addresses, page tables and the TLB.
//!
//! The TLB is keyed by `(asid, bits [47:12])`. The upper sixteen bits of a
//! virtual address are never stored, so a non-canonical address hits the
//! entry of the canonical address it shares bits `[47:0]` with.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const CANONICAL_BITS: u32 = 48;
pub const CANONICAL_MASK: u64 = (1 << CANONICAL_BITS) - 1;
pub const PHYS_ADDR_BITS: u32 = 32;
pub const PHYS_PAGES: u64 = 1 << (PHYS_ADDR_BITS - PAGE_SHIFT);
pub const DEFAULT_TLB_ENTRIES: usize = 64;

const TAG_MASK: u64 = (1 << (CANONICAL_BITS - PAGE_SHIFT)) - 1;

/// Address space identifier. Hardware threads running in the same address
/// space share one.
pub type Asid = u16;

pub type PhysAddr = u64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub fn raw(self) -> u64 {
        self.0
    }

    /// Bits `[63:48]` replicate bit 47.
    pub fn is_canonical(self) -> bool {
        let top = self.0 >> (CANONICAL_BITS - 1);
        top == 0 || top == (1 << (64 - CANONICAL_BITS + 1)) - 1
    }

    pub fn canonical_bits(self) -> u64 {
        self.0 & CANONICAL_MASK
    }

    /// Bits `[47:12]`.
    pub fn page_tag(self) -> u64 {
        (self.0 >> PAGE_SHIFT) & TAG_MASK
    }

    /// Bits `[11:0]`.
    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    /// Bits `[63:48]`.
    pub fn upper16(self) -> u16 {
        (self.0 >> CANONICAL_BITS) as u16
    }

    pub fn from_parts(upper16: u16, page_tag: u64, page_offset: u64) -> VirtAddr {
        VirtAddr(
            (u64::from(upper16) << CANONICAL_BITS)
                | ((page_tag & TAG_MASK) << PAGE_SHIFT)
                | (page_offset & (PAGE_SIZE - 1)),
        )
    }

    pub fn with_upper16(self, upper16: u16) -> VirtAddr {
        VirtAddr::from_parts(upper16, self.page_tag(), self.page_offset())
    }

    /// The canonical address sharing bits `[47:0]` with `self`.
    pub fn canonicalize(self) -> VirtAddr {
        let low = self.canonical_bits();
        if low >> (CANONICAL_BITS - 1) == 1 {
            VirtAddr(low | !CANONICAL_MASK)
        } else {
            VirtAddr(low)
        }
    }

    pub fn page_base(self) -> VirtAddr {
        VirtAddr(self.0 & !(PAGE_SIZE - 1))
    }
}

impl fmt::Debug for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtAddr({:#018x})", self.0)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl From<u64> for VirtAddr {
    fn from(raw: u64) -> Self {
        VirtAddr(raw)
    }
}

pub fn is_canonical(addr: VirtAddr) -> bool {
    addr.is_canonical()
}

/// True iff bits `[47:0]` of `a` and `b` are equal.
pub fn canonical_alias(a: VirtAddr, b: VirtAddr) -> bool {
    a.canonical_bits() == b.canonical_bits()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TranslationFault {
    #[error("non-canonical address")]
    NonCanonical,
    #[error("page not mapped")]
    PageNotMapped,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("virtual page {0} is not canonical")]
    NonCanonical(VirtAddr),
    #[error("virtual page {0} is not page aligned")]
    Unaligned(VirtAddr),
    #[error("physical page {0:#x} is outside the {PHYS_ADDR_BITS}-bit physical space")]
    PhysOutOfRange(u64),
    #[error("virtual page {vaddr} in context {asid} is already mapped")]
    AlreadyMapped { asid: Asid, vaddr: VirtAddr },
    #[error("physical page {phys_page:#x} is already mapped in context {asid}")]
    Aliased { asid: Asid, phys_page: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub phys_page: u64,
    pub user_accessible: bool,
    pub writable: bool,
}

impl Mapping {
    pub fn phys_addr(&self, offset: u64) -> PhysAddr {
        (self.phys_page << PAGE_SHIFT) | (offset & (PAGE_SIZE - 1))
    }
}

/// Single-level page table per address space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageTable {
    pages: BTreeMap<(Asid, u64), Mapping>,
}

impl PageTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps the page at `vaddr`. Two virtual pages of one context may not
    /// share a physical page; use [`PageTable::map_alias`] for that.
    pub fn map(&mut self, asid: Asid, vaddr: VirtAddr, mapping: Mapping) -> Result<(), MapError> {
        if self
            .pages
            .iter()
            .any(|(&(a, _), m)| a == asid && m.phys_page == mapping.phys_page)
        {
            return Err(MapError::Aliased {
                asid,
                phys_page: mapping.phys_page,
            });
        }
        self.map_alias(asid, vaddr, mapping)
    }

    pub fn map_alias(
        &mut self,
        asid: Asid,
        vaddr: VirtAddr,
        mapping: Mapping,
    ) -> Result<(), MapError> {
        if !vaddr.is_canonical() {
            return Err(MapError::NonCanonical(vaddr));
        }
        if vaddr.page_offset() != 0 {
            return Err(MapError::Unaligned(vaddr));
        }
        if mapping.phys_page >= PHYS_PAGES {
            return Err(MapError::PhysOutOfRange(mapping.phys_page));
        }
        let key = (asid, vaddr.page_tag());
        if self.pages.contains_key(&key) {
            return Err(MapError::AlreadyMapped { asid, vaddr });
        }
        self.pages.insert(key, mapping);
        Ok(())
    }

    /// Mapping for the page holding `vaddr`, ignoring canonicality.
    pub fn lookup(&self, asid: Asid, vaddr: VirtAddr) -> Option<Mapping> {
        self.pages.get(&(asid, vaddr.page_tag())).copied()
    }

    /// Architectural translation: canonicality is checked first.
    pub fn translate(
        &self,
        asid: Asid,
        vaddr: VirtAddr,
    ) -> Result<(PhysAddr, Mapping), TranslationFault> {
        if !vaddr.is_canonical() {
            return Err(TranslationFault::NonCanonical);
        }
        let m = self
            .lookup(asid, vaddr)
            .ok_or(TranslationFault::PageNotMapped)?;
        Ok((m.phys_addr(vaddr.page_offset()), m))
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub asid: Asid,
    /// Bits `[47:12]` of the virtual address. Nothing above bit 47 is kept.
    pub tag: u64,
    pub phys_page: u64,
    pub user_accessible: bool,
    pub writable: bool,
}

impl TlbEntry {
    pub fn phys_addr(&self, vaddr: VirtAddr) -> PhysAddr {
        (self.phys_page << PAGE_SHIFT) | vaddr.page_offset()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushScope {
    All,
    Asid(Asid),
}

/// Fully associative, LRU-replaced, ASID-tagged TLB.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    // (entry, last-use stamp)
    slots: Vec<(TlbEntry, u64)>,
    clock: u64,
}

impl Default for Tlb {
    fn default() -> Self {
        Tlb::new(DEFAULT_TLB_ENTRIES)
    }
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "TLB needs at least one entry");
        Tlb {
            capacity,
            slots: Vec::with_capacity(capacity),
            clock: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn position(&self, asid: Asid, addr: VirtAddr) -> Option<usize> {
        let tag = addr.page_tag();
        self.slots
            .iter()
            .position(|(e, _)| e.asid == asid && e.tag == tag)
    }

    /// Hit test on `(asid, bits [47:12])`; refreshes recency on a hit and
    /// never inserts.
    pub fn lookup(&mut self, asid: Asid, addr: VirtAddr) -> Option<TlbEntry> {
        let idx = self.position(asid, addr)?;
        self.clock += 1;
        self.slots[idx].1 = self.clock;
        Some(self.slots[idx].0)
    }

    /// Like [`Tlb::lookup`] but leaves replacement state untouched.
    pub fn peek(&self, asid: Asid, addr: VirtAddr) -> Option<TlbEntry> {
        self.position(asid, addr).map(|idx| self.slots[idx].0)
    }

    /// Walks `pt` for a canonical `addr` and caches the translation.
    pub fn fill(
        &mut self,
        asid: Asid,
        addr: VirtAddr,
        pt: &PageTable,
    ) -> Result<TlbEntry, TranslationFault> {
        if !addr.is_canonical() {
            return Err(TranslationFault::NonCanonical);
        }
        let m = pt
            .lookup(asid, addr)
            .ok_or(TranslationFault::PageNotMapped)?;
        let entry = TlbEntry {
            asid,
            tag: addr.page_tag(),
            phys_page: m.phys_page,
            user_accessible: m.user_accessible,
            writable: m.writable,
        };
        self.insert(entry);
        Ok(entry)
    }

    /// Inserts `entry`, returning the evicted least-recently-used entry if
    /// the TLB was full.
    pub fn insert(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        self.clock += 1;
        if let Some(slot) = self
            .slots
            .iter_mut()
            .find(|(e, _)| e.asid == entry.asid && e.tag == entry.tag)
        {
            *slot = (entry, self.clock);
            return None;
        }
        let mut evicted = None;
        if self.slots.len() == self.capacity {
            let victim = self
                .slots
                .iter()
                .enumerate()
                .min_by_key(|(_, (_, stamp))| *stamp)
                .map(|(i, _)| i)
                .expect("full TLB has entries");
            evicted = Some(self.slots.swap_remove(victim).0);
        }
        self.slots.push((entry, self.clock));
        evicted
    }

    pub fn flush(&mut self, scope: FlushScope) {
        match scope {
            FlushScope::All => self.slots.clear(),
            FlushScope::Asid(asid) => self.slots.retain(|(e, _)| e.asid != asid),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.slots.iter().map(|(e, _)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::listings::{ADDR1, NONCANONICAL_MASK};

    fn user_page(phys_page: u64) -> Mapping {
        Mapping {
            phys_page,
            user_accessible: true,
            writable: true,
        }
    }

    #[test]
    fn canonical_boundaries() {
        assert!(VirtAddr(0x0000_7FFF_FFFF_FFFF).is_canonical());
        assert!(VirtAddr(0xFFFF_8000_0000_0000).is_canonical());
        assert!(!VirtAddr(0x0000_8000_0000_0000).is_canonical());
        assert!(!VirtAddr(0xFFFF_7FFF_FFFF_FFFF).is_canonical());
        assert!(!VirtAddr(0x0000_1000_0000_0000 | NONCANONICAL_MASK).is_canonical());
    }

    #[test]
    fn alias_of_listing_mask() {
        let a = VirtAddr(ADDR1);
        assert!(canonical_alias(a, VirtAddr(ADDR1 | NONCANONICAL_MASK)));
        assert!(!canonical_alias(a, VirtAddr(ADDR1 + PAGE_SIZE)));
        assert_eq!(VirtAddr(ADDR1 | NONCANONICAL_MASK).canonicalize(), a);
        assert_eq!(
            VirtAddr(0x0000_8000_0000_1234).canonicalize(),
            VirtAddr(0xFFFF_8000_0000_1234)
        );
    }

    #[test]
    fn decomposition_reconstructs() {
        let a = VirtAddr(0xff0f_1234_5678_9abc);
        assert_eq!(a.upper16(), 0xff0f);
        assert_eq!(a.page_tag(), 0x0001_2345_6789);
        assert_eq!(a.page_offset(), 0xabc);
        assert_eq!(
            VirtAddr::from_parts(a.upper16(), a.page_tag(), a.page_offset()),
            a
        );
    }

    #[test]
    fn noncanonical_alias_hits_canonical_entry() {
        let mut pt = PageTable::new();
        pt.map(0, VirtAddr(ADDR1), user_page(0x100)).unwrap();
        let mut tlb = Tlb::default();
        assert_eq!(tlb.lookup(0, VirtAddr(ADDR1)), None);
        let filled = tlb.fill(0, VirtAddr(ADDR1), &pt).unwrap();
        let hit = tlb.lookup(0, VirtAddr(ADDR1 | NONCANONICAL_MASK)).unwrap();
        assert_eq!(hit, filled);
        assert_eq!(hit.phys_addr(VirtAddr(ADDR1 + 8)), 0x100_008);
    }

    #[test]
    fn lookup_never_inserts() {
        let mut tlb = Tlb::default();
        for i in 0..10 {
            assert!(tlb.lookup(0, VirtAddr(i << PAGE_SHIFT)).is_none());
        }
        assert!(tlb.is_empty());
    }

    #[test]
    fn fill_errors() {
        let pt = PageTable::new();
        let mut tlb = Tlb::default();
        assert_eq!(
            tlb.fill(0, VirtAddr(ADDR1), &pt),
            Err(TranslationFault::PageNotMapped)
        );
        assert_eq!(
            tlb.fill(0, VirtAddr(ADDR1 | NONCANONICAL_MASK), &pt),
            Err(TranslationFault::NonCanonical)
        );
    }

    #[test]
    fn lru_eviction_over_capacity_plus_one() {
        let cap = 4;
        let mut pt = PageTable::new();
        for i in 0..=cap as u64 {
            pt.map(0, VirtAddr(i << PAGE_SHIFT), user_page(i)).unwrap();
        }
        let mut tlb = Tlb::new(cap);
        for i in 0..=cap as u64 {
            tlb.fill(0, VirtAddr(i << PAGE_SHIFT), &pt).unwrap();
        }
        assert_eq!(tlb.len(), cap);
        assert!(tlb.peek(0, VirtAddr(0)).is_none());
        for i in 1..=cap as u64 {
            assert!(tlb.peek(0, VirtAddr(i << PAGE_SHIFT)).is_some());
        }
        // Touch page 1 so that page 2 becomes the victim.
        tlb.lookup(0, VirtAddr(1 << PAGE_SHIFT));
        tlb.fill(0, VirtAddr(0), &pt).unwrap();
        assert!(tlb.peek(0, VirtAddr(1 << PAGE_SHIFT)).is_some());
        assert!(tlb.peek(0, VirtAddr(2 << PAGE_SHIFT)).is_none());
    }

    #[test]
    fn selective_and_full_flush() {
        let mut pt = PageTable::new();
        pt.map(1, VirtAddr(ADDR1), user_page(1)).unwrap();
        pt.map(2, VirtAddr(ADDR1), user_page(2)).unwrap();
        let mut tlb = Tlb::default();
        tlb.fill(1, VirtAddr(ADDR1), &pt).unwrap();
        tlb.fill(2, VirtAddr(ADDR1), &pt).unwrap();
        tlb.flush(FlushScope::Asid(1));
        assert!(tlb.peek(1, VirtAddr(ADDR1)).is_none());
        assert_eq!(tlb.peek(2, VirtAddr(ADDR1)).unwrap().phys_page, 2);
        tlb.flush(FlushScope::All);
        assert!(tlb.is_empty());
    }

    #[test]
    fn page_table_rules() {
        let mut pt = PageTable::new();
        assert!(matches!(
            pt.map(0, VirtAddr(ADDR1 | NONCANONICAL_MASK), user_page(1)),
            Err(MapError::NonCanonical(_))
        ));
        assert!(matches!(
            pt.map(0, VirtAddr(ADDR1 + 1), user_page(1)),
            Err(MapError::Unaligned(_))
        ));
        assert!(matches!(
            pt.map(0, VirtAddr(ADDR1), user_page(PHYS_PAGES)),
            Err(MapError::PhysOutOfRange(_))
        ));
        pt.map(0, VirtAddr(ADDR1), user_page(7)).unwrap();
        assert!(matches!(
            pt.map(0, VirtAddr(ADDR1 + PAGE_SIZE), user_page(7)),
            Err(MapError::Aliased { .. })
        ));
        pt.map_alias(0, VirtAddr(ADDR1 + PAGE_SIZE), user_page(7))
            .unwrap();
        assert_eq!(
            pt.translate(0, VirtAddr(ADDR1 + 5)).unwrap().0,
            (7 << PAGE_SHIFT) + 5
        );
        assert_eq!(
            pt.translate(0, VirtAddr(ADDR1 | NONCANONICAL_MASK)),
            Err(TranslationFault::NonCanonical)
        );
    }
}
