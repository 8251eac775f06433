//! Reference models shared by the integration tests.
//!
//! `Interp` is a plain in-order interpreter with its own page walk and byte
//! memory. It shares nothing with the pipeline beyond the instruction
//! types, so agreement between the two is evidence rather than tautology.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ncsim::cache::CacheConfig;
use ncsim::isa::{parse_program, AluOp, Instruction, Operand, Program};
use ncsim::pipeline::{CoreState, CpuConfig, FaultKind, Preset, ThreadStatus};
use ncsim::vmem::{Mapping, PageTable, VirtAddr};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sign-extension test of bits [63:47].
pub fn oracle_is_canonical(addr: u64) -> bool {
    (((addr << 16) as i64) >> 16) as u64 == addr
}

/// Bits [47:0] equal.
pub fn oracle_alias(a: u64, b: u64) -> bool {
    (a ^ b) & 0x0000_ffff_ffff_ffff == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub asid: u16,
    pub vpage: u64,
    pub ppage: u64,
    pub user: bool,
    pub writable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exit {
    Halted,
    Faulted { pc: usize, kind: FaultKind },
}

/// Architectural state compared between the interpreter and the core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u64; 16],
    pub memory: BTreeMap<u64, u8>,
    pub asid: u16,
    pub exit: Exit,
}

pub struct Interp {
    pages: BTreeMap<(u16, u64), Region>,
    memory: BTreeMap<u64, u8>,
}

impl Interp {
    pub fn new(regions: &[Region], init: &[(u64, u8)]) -> Self {
        let pages = regions.iter().map(|r| ((r.asid, r.vpage), *r)).collect();
        let mut memory = BTreeMap::new();
        for &(p, b) in init {
            memory.insert(p, b);
        }
        Interp { pages, memory }
    }

    fn walk(&self, asid: u16, vaddr: u64, write: bool, check_perm: bool) -> Result<u64, FaultKind> {
        if !oracle_is_canonical(vaddr) {
            return Err(FaultKind::NonCanonical);
        }
        let r = self
            .pages
            .get(&(asid, vaddr >> 12))
            .ok_or(FaultKind::PageNotMapped)?;
        if check_perm && (!r.user || (write && !r.writable)) {
            return Err(FaultKind::PermissionDenied);
        }
        Ok((r.ppage << 12) | (vaddr & 0xfff))
    }

    pub fn run(mut self, program: &Program, max_steps: usize) -> ArchState {
        let mut regs = [0u64; 16];
        let mut asid = 0u16;
        let mut pc = program.entry;
        let mut exit = Exit::Halted;
        for _ in 0..max_steps {
            let Some(instr) = program.instructions.get(pc) else {
                break;
            };
            let mut next = pc + 1;
            let fault = match *instr {
                Instruction::Ldi { dst, imm } => {
                    regs[dst.index()] = imm;
                    None
                }
                Instruction::Alu { op, dst, src } => {
                    let rhs = match src {
                        Operand::Reg(r) => regs[r.index()],
                        Operand::Imm(v) => v,
                    };
                    let lhs = regs[dst.index()];
                    regs[dst.index()] = match op {
                        AluOp::Add => lhs.wrapping_add(rhs),
                        AluOp::Or => lhs | rhs,
                        AluOp::And => lhs & rhs,
                        AluOp::Shl => lhs << (rhs % 64),
                    };
                    None
                }
                Instruction::Ld { dst, mem, width } => {
                    let va = regs[mem.base.index()].wrapping_add(mem.disp as i64 as u64);
                    match self.walk(asid, va, false, true) {
                        Ok(pa) => {
                            let mut v = 0u64;
                            for i in 0..width.bytes() {
                                let b = self.memory.get(&(pa + i)).copied().unwrap_or(0);
                                v |= u64::from(b) << (8 * i);
                            }
                            regs[dst.index()] = v;
                            None
                        }
                        Err(k) => Some(k),
                    }
                }
                Instruction::St { mem, src, width } => {
                    let va = regs[mem.base.index()].wrapping_add(mem.disp as i64 as u64);
                    let v = match src {
                        Operand::Reg(r) => regs[r.index()],
                        Operand::Imm(v) => v,
                    };
                    match self.walk(asid, va, true, true) {
                        Ok(pa) => {
                            for i in 0..width.bytes() {
                                self.memory.insert(pa + i, (v >> (8 * i)) as u8);
                            }
                            None
                        }
                        Err(k) => Some(k),
                    }
                }
                Instruction::Clflush { mem } => {
                    let va = regs[mem.base.index()].wrapping_add(mem.disp as i64 as u64);
                    self.walk(asid, va, false, false).err()
                }
                Instruction::Lfence => None,
                Instruction::Rdt { .. } => panic!("RDT has no architectural reference value"),
                Instruction::Jnz { cond, target } => {
                    if regs[cond.index()] != 0 {
                        next = target;
                    }
                    None
                }
                Instruction::Ctxsw { to } => {
                    asid = to;
                    None
                }
                Instruction::Hlt => break,
            };
            if let Some(kind) = fault {
                exit = Exit::Faulted { pc, kind };
                break;
            }
            pc = next;
        }
        self.memory.retain(|_, b| *b != 0);
        ArchState {
            regs,
            memory: self.memory,
            asid,
            exit,
        }
    }
}

/// A generated program with the machine it runs on.
#[derive(Debug, Clone)]
pub struct Case {
    pub text: String,
    pub program: Program,
    pub regions: Vec<Region>,
    pub init: Vec<(u64, u8)>,
    pub warm: Vec<u64>,
    pub tlb: Vec<(u16, u64)>,
    pub jitter: u64,
}

const A: u64 = 0x0000_1000_0000_0000;
const B: u64 = 0x0000_1000_0000_1000;
const RO: u64 = 0x0000_1000_0001_0000;
const KERN: u64 = 0xffff_8000_0000_0000;
const UNMAPPED: u64 = 0x0000_5000_0000_0000;
const UPPER: [u64; 4] = [0xff0f, 0x8000, 0x0001, 0x7fff];

pub fn regions() -> Vec<Region> {
    let r = |asid, vpage: u64, ppage, user, writable| Region {
        asid,
        vpage: vpage >> 12,
        ppage,
        user,
        writable,
    };
    vec![
        r(0, A, 0x100, true, true),
        r(0, B, 0x101, true, true),
        r(0, RO, 0x102, true, false),
        r(0, KERN, 0x103, false, true),
        r(1, A, 0x180, true, true),
        r(1, KERN, 0x103, false, true),
    ]
}

fn reg(rng: &mut ChaCha8Rng) -> u8 {
    rng.random_range(0..16)
}

fn pointer(rng: &mut ChaCha8Rng, width: u64) -> (u64, i64) {
    let base = *[A, A, A, B, B, B, RO, RO, KERN, UNMAPPED]
        .choose(rng)
        .unwrap();
    let base = if rng.random_ratio(1, 12) {
        (base & 0x0000_ffff_ffff_ffff) | (UPPER.choose(rng).unwrap() << 48)
    } else {
        base
    };
    let offset = rng.random_range(0..=(64 - width)) * if rng.random_bool(0.5) { 1 } else { 8 };
    let offset = offset.min(4096 - width);
    // Split the offset between the register and the displacement.
    let disp = rng.random_range(0..=offset) as i64;
    (base + offset - disp as u64, disp)
}

fn width(rng: &mut ChaCha8Rng) -> (u64, &'static str) {
    *[(1, ".1"), (2, ".2"), (4, ".4"), (8, "")]
        .choose(rng)
        .unwrap()
}

/// Random single-thread program: forward jumps only, no `RDT`, one `HLT`
/// at the end and occasionally another before it.
pub fn generate(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body_len = rng.random_range(4..40);
    let mut lines: Vec<String> = Vec::new();
    let mut jumps = Vec::new();
    for _ in 0..body_len {
        let roll = rng.random_range(0..100);
        let line = match roll {
            0..=11 => format!(
                "LDI r{}, {:#x}",
                reg(&mut rng),
                rng.random::<u64>() >> rng.random_range(0..64)
            ),
            12..=27 => {
                let op = ["ADD", "OR", "AND", "SHL"].choose(&mut rng).unwrap();
                if rng.random_bool(0.5) {
                    format!("{op} r{}, r{}", reg(&mut rng), reg(&mut rng))
                } else {
                    format!(
                        "{op} r{}, {:#x}",
                        reg(&mut rng),
                        rng.random_range(0..4096u64)
                    )
                }
            }
            28..=47 => {
                let (w, suffix) = width(&mut rng);
                let (ptr, disp) = pointer(&mut rng, w);
                let base = reg(&mut rng);
                lines.push(format!("LDI r{base}, {ptr:#x}"));
                format!("LD{suffix} r{}, [r{base}+{disp}]", reg(&mut rng))
            }
            48..=67 => {
                let (w, suffix) = width(&mut rng);
                let (ptr, disp) = pointer(&mut rng, w);
                let base = reg(&mut rng);
                lines.push(format!("LDI r{base}, {ptr:#x}"));
                if rng.random_bool(0.5) {
                    format!("ST{suffix} [r{base}+{disp}], r{}", reg(&mut rng))
                } else {
                    format!("ST{suffix} [r{base}+{disp}], {:#x}", rng.random::<u16>())
                }
            }
            68..=74 => {
                let (ptr, disp) = pointer(&mut rng, 1);
                let base = reg(&mut rng);
                lines.push(format!("LDI r{base}, {ptr:#x}"));
                format!("CLFLUSH [r{base}+{disp}]")
            }
            75..=80 => "LFENCE".to_string(),
            81..=86 => format!("CTXSW {}", rng.random_range(0..2)),
            87..=97 => {
                jumps.push(lines.len());
                format!("JNZ r{}, ?", reg(&mut rng))
            }
            _ => "HLT".to_string(),
        };
        lines.push(line);
    }
    lines.push("HLT".to_string());
    let mut labels = BTreeMap::new();
    for &j in &jumps {
        let target = rng.random_range(j + 1..lines.len());
        labels.insert(target, format!("L{target}"));
        lines[j] = lines[j].replace('?', &format!("L{target}"));
    }
    let mut text = String::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(l) = labels.get(&i) {
            let _ = writeln!(text, "{l}:");
        }
        let _ = writeln!(text, "    {line}");
    }
    let program = parse_program(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));

    let regions = regions();
    let mut init = Vec::new();
    for ppage in [0x100u64, 0x101, 0x102, 0x103, 0x180] {
        for _ in 0..rng.random_range(0..24) {
            init.push(((ppage << 12) + rng.random_range(0..128), rng.random::<u8>()));
        }
    }
    let warm = (0..rng.random_range(0..6))
        .map(|_| {
            ([0x100u64, 0x101, 0x102, 0x103, 0x180]
                .choose(&mut rng)
                .unwrap()
                << 12)
                + 64 * rng.random_range(0..2)
        })
        .collect();
    let tlb = (0..rng.random_range(0..4))
        .map(|_| {
            *[(0, A), (0, B), (0, RO), (0, KERN), (1, A)]
                .choose(&mut rng)
                .unwrap()
        })
        .collect();
    Case {
        text,
        program,
        regions,
        init,
        warm,
        tlb,
        jitter: rng.random_range(0..4),
    }
}

impl Case {
    pub fn reference(&self) -> ArchState {
        Interp::new(&self.regions, &self.init).run(&self.program, 10_000)
    }

    pub fn core(&self, preset: Preset, seed: u64) -> CoreState {
        let mut pt = PageTable::new();
        for r in &self.regions {
            let m = Mapping {
                phys_page: r.ppage,
                user_accessible: r.user,
                writable: r.writable,
            };
            pt.map(r.asid, VirtAddr(r.vpage << 12), m).unwrap();
        }
        let config = CpuConfig {
            preset,
            seed,
            cache: CacheConfig {
                jitter: self.jitter,
                ..CacheConfig::default()
            },
            ..CpuConfig::default()
        };
        let mut core = CoreState::new(config, pt).unwrap();
        for &(p, b) in &self.init {
            core.cache_mut().memory_mut().set_byte(p, b);
        }
        for &p in &self.warm {
            core.cache_access(p, None);
        }
        for &(asid, va) in &self.tlb {
            core.tlb_fill(asid, VirtAddr(va)).unwrap();
        }
        core
    }

    pub fn simulate(&self, preset: Preset, seed: u64) -> ArchState {
        let mut core = self.core(preset, seed);
        core.load_program(0, self.program.clone(), 0).unwrap();
        core.run().unwrap_or_else(|e| panic!("{e}\n{}", self.text));
        let exit = match core.thread_status(0) {
            ThreadStatus::Halted => Exit::Halted,
            ThreadStatus::Faulted => {
                let f = &core.faults()[0];
                Exit::Faulted {
                    pc: f.pc,
                    kind: f.kind,
                }
            }
            ThreadStatus::Running => unreachable!("run returned"),
        };
        ArchState {
            regs: *core.regs(0),
            memory: core.cache().memory().nonzero_bytes().collect(),
            asid: core.thread_asid(0),
            exit,
        }
    }
}

/// Outcome counts from [`differential`].
#[derive(Debug, Default)]
pub struct DiffStats {
    pub programs: u64,
    pub halted: usize,
    pub faults: [usize; 3],
}

/// Runs `programs` generated programs on every preset and compares the
/// final architectural state with the reference. Returns the first
/// divergence.
pub fn differential(programs: u64) -> Result<DiffStats, String> {
    let mut stats = DiffStats {
        programs,
        ..DiffStats::default()
    };
    for seed in 0..programs {
        let case = generate(seed);
        let want = case.reference();
        match want.exit {
            Exit::Halted => stats.halted += 1,
            Exit::Faulted { kind, .. } => {
                stats.faults[match kind {
                    FaultKind::NonCanonical => 0,
                    FaultKind::PageNotMapped => 1,
                    FaultKind::PermissionDenied => 2,
                }] += 1
            }
        }
        for preset in Preset::ALL {
            let got = case.simulate(preset, seed);
            if got != want {
                return Err(format!(
                    "seed {seed} on {preset}\n{}\nreference {want:?}\ncore      {got:?}",
                    case.text
                ));
            }
        }
    }
    Ok(stats)
}
