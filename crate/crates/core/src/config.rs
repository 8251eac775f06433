//! Run configuration, memory maps and preloads, shared by the CLI and the
//! scenario catalog. Addresses are written as hex strings.

use std::fmt;
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cache::CacheConfig;
use crate::isa::listings::{ADDR1, ORACLE_BASE};
use crate::pipeline::{CoreState, CpuConfig, Preset};
use crate::sidechannel::{OracleArray, ORACLE_SLOTS};
use crate::vmem::{Asid, Mapping, PageTable, VirtAddr, PAGE_SIZE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A 64-bit number written as an integer or as a decimal or `0x` string.
/// Always serialized as a hex string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hex(pub u64);

impl Serialize for Hex {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:#x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct HexVisitor;

        impl Visitor<'_> for HexVisitor {
            type Value = Hex;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or a \"0x...\" string")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Hex, E> {
                Ok(Hex(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Hex, E> {
                u64::try_from(v)
                    .map(Hex)
                    .map_err(|_| E::custom(format!("negative number {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Hex, E> {
                crate::isa::parse_u64(v.trim())
                    .map(Hex)
                    .ok_or_else(|| E::custom(format!("invalid number `{v}`")))
            }
        }

        d.deserialize_any(HexVisitor)
    }
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn yes() -> bool {
    true
}

fn one() -> u64 {
    1
}

/// `count` consecutive virtual pages mapped onto consecutive physical pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRegion {
    #[serde(default)]
    pub context: Asid,
    pub virt: Hex,
    /// Physical page number.
    pub phys: Hex,
    #[serde(default = "yes")]
    pub user: bool,
    #[serde(default = "yes")]
    pub writable: bool,
    #[serde(default = "one")]
    pub count: u64,
}

/// Memory contents and cache/TLB state set up before a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preload {
    #[serde(default)]
    pub context: Asid,
    pub addr: Hex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<Vec<u8>>,
    /// Little-endian value of `width` bytes; an alternative to `bytes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Hex>,
    #[serde(default = "one")]
    pub width: u64,
    /// `true` makes the line resident, `false` evicts it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached: Option<bool>,
    /// Fill the TLB entry of the page.
    #[serde(default, skip_serializing_if = "is_default")]
    pub tlb: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub base: Hex,
    #[serde(default)]
    pub context: Asid,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            base: Hex(ORACLE_BASE),
            context: 0,
        }
    }
}

impl OracleSpec {
    pub fn array(&self) -> Result<OracleArray, ConfigError> {
        OracleArray::new(VirtAddr(self.base.0)).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Output file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: String,
    pub trace: String,
    pub signal: String,
    pub faults: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_events: Option<String>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: "out".into(),
            trace: "trace.jsonl".into(),
            signal: "signal.csv".into(),
            faults: "faults.json".into(),
            cache_events: None,
        }
    }
}

/// Standard memory layout: `ADDR1` and the oracle array in context 0.
pub fn default_memory() -> Vec<MemoryRegion> {
    vec![
        MemoryRegion {
            context: 0,
            virt: Hex(ADDR1),
            phys: Hex(0x100),
            user: true,
            writable: true,
            count: 1,
        },
        MemoryRegion {
            context: 0,
            virt: Hex(ORACLE_BASE),
            phys: Hex(0x1000),
            user: true,
            writable: true,
            count: ORACLE_SLOTS as u64,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub window_cycles: u64,
    pub rob_size: usize,
    pub smt_contexts: usize,
    pub tlb_entries: usize,
    pub max_cycles: u64,
    /// Flush+Reload threshold; calibrated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<u64>,
    pub cache: CacheConfig,
    pub oracle: OracleSpec,
    pub output: OutputSpec,
    pub memory: Vec<MemoryRegion>,
    pub preload: Vec<Preload>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cpu = CpuConfig::default();
        RunConfig {
            preset: cpu.preset,
            seed: cpu.seed,
            window_cycles: cpu.window_cycles,
            rob_size: cpu.rob_size,
            smt_contexts: cpu.smt_contexts,
            tlb_entries: cpu.tlb_entries,
            max_cycles: cpu.max_cycles,
            threshold: None,
            cache: cpu.cache,
            oracle: OracleSpec::default(),
            output: OutputSpec::default(),
            memory: default_memory(),
            preload: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cache
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("cache: {e}")))?;
        self.oracle.array()?;
        build_page_table(&self.memory)?;
        Ok(())
    }

    pub fn cpu_config(&self) -> CpuConfig {
        CpuConfig {
            preset: self.preset,
            rob_size: self.rob_size,
            window_cycles: self.window_cycles,
            smt_contexts: self.smt_contexts,
            seed: self.seed,
            tlb_entries: self.tlb_entries,
            cache: self.cache,
            max_cycles: self.max_cycles,
        }
    }

    /// Fresh core with the memory map installed and preloads applied.
    pub fn build_core(&self) -> Result<CoreState, ConfigError> {
        let mut core = CoreState::new(self.cpu_config(), build_page_table(&self.memory)?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        apply_preloads(&mut core, &self.preload)?;
        Ok(core)
    }
}

pub fn build_page_table(regions: &[MemoryRegion]) -> Result<PageTable, ConfigError> {
    let mut pt = PageTable::new();
    for r in regions {
        for i in 0..r.count {
            let virt = VirtAddr(r.virt.0.wrapping_add(i * PAGE_SIZE));
            let mapping = Mapping {
                phys_page: r.phys.0 + i,
                user_accessible: r.user,
                writable: r.writable,
            };
            pt.map(r.context, virt, mapping).map_err(|e| {
                ConfigError::Invalid(format!("memory region at {:#x}: {e}", r.virt.0))
            })?;
        }
    }
    Ok(pt)
}

/// Writes preload bytes to physical memory, then sets line residency and
/// TLB state as requested.
pub fn apply_preloads(core: &mut CoreState, preloads: &[Preload]) -> Result<(), ConfigError> {
    for p in preloads {
        let vaddr = VirtAddr(p.addr.0);
        let paddr = core.translate(p.context, vaddr).map_err(|e| {
            ConfigError::Invalid(format!("preload at {vaddr} in context {}: {e}", p.context))
        })?;
        match (&p.bytes, p.value) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(format!(
                    "preload at {vaddr}: give `bytes` or `value`, not both"
                )))
            }
            (Some(bytes), None) => core.cache_mut().memory_mut().write_bytes(paddr, bytes),
            (None, Some(v)) => {
                if !(1..=8).contains(&p.width) {
                    return Err(ConfigError::Invalid(format!(
                        "preload at {vaddr}: width {} not in 1..=8",
                        p.width
                    )));
                }
                core.cache_mut().memory_mut().write(paddr, v.0, p.width);
            }
            (None, None) => {}
        }
        match p.cached {
            Some(true) => {
                core.cache_access(paddr, None);
            }
            Some(false) => core.cache_mut().flush_line(paddr),
            None => {}
        }
        if p.tlb {
            core.tlb_fill(p.context, vaddr)
                .map_err(|e| ConfigError::Invalid(format!("preload at {vaddr}: {e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("windw_cycles = 5").unwrap_err();
        assert!(err.to_string().contains("windw_cycles"), "{err}");
        let err = RunConfig::from_toml("[cache]\nhit = 5").unwrap_err();
        assert!(err.to_string().contains("hit"), "{err}");
    }

    #[test]
    fn numbers_accept_hex_strings_and_integers() {
        let c = RunConfig::from_toml(
            "memory = [{ virt = \"0x100000000000\", phys = 256 }]\n\
             [[preload]]\naddr = \"0x100000000008\"\nvalue = \"0x2a\"\ncached = true\ntlb = true",
        )
        .unwrap();
        assert_eq!(c.memory[0].phys, Hex(0x100));
        assert_eq!(c.memory[0].count, 1);
        let core = c.build_core().unwrap();
        assert_eq!(core.cache().memory().byte(0x100008), 0x2a);
        assert!(core.cache().is_resident(0x100008));
        assert_eq!(core.tlb().len(), 1);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig {
            preset: Preset::LegacyIntel,
            threshold: Some(30),
            ..RunConfig::default()
        };
        c.preload.push(Preload {
            context: 1,
            addr: Hex(0x1234),
            bytes: Some(vec![1, 2, 3]),
            value: None,
            width: 1,
            cached: Some(false),
            tlb: true,
        });
        c.output.cache_events = Some("cache.csv".into());
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml("[cache]\nsets = 3").is_err());
        assert!(RunConfig::from_toml("[oracle]\nbase = \"0x1008\"").is_err());
        let overlap = "memory = [{ virt = 0x1000, phys = 1 }, { virt = 0x1000, phys = 2 }]";
        assert!(RunConfig::from_toml(overlap).is_err());
        assert!(RunConfig::from_toml("preset = \"pentium\"").is_err());
    }

    #[test]
    fn preload_errors() {
        let bad = |p: &str| {
            let c = RunConfig::from_toml(p).unwrap();
            c.build_core().err().map(|e| e.to_string())
        };
        assert!(bad("[[preload]]\naddr = 0x5000\nvalue = 1")
            .unwrap()
            .contains("not mapped"));
        assert!(
            bad("[[preload]]\naddr = \"0x100000000000\"\nvalue = 1\nwidth = 9")
                .unwrap()
                .contains("width")
        );
        assert!(bad("[[preload]]\naddr = \"0x100000000000\"\nvalue = 1\nbytes = [1]").is_some());
    }
}
