//! Declarative attack scenarios with built-in expected outcomes.
//!
//! A scenario file is TOML. Its `[constants]` table is read first; every
//! `{NAME}` placeholder elsewhere in the file is then replaced by the
//! constant's value in hex before the file is parsed in full. A constant
//! written as `{ random = [lo, hi] }` is drawn from the run's seed.
//!
//! Each round reapplies the preloads, flushes the oracle, runs every
//! thread to completion and reloads the oracle. Slots hot in a majority of
//! rounds form the observed signal.

mod covert;
mod truth_table;

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    apply_preloads, build_page_table, ConfigError, Hex, MemoryRegion, OracleSpec, Preload,
};
use crate::isa::{parse_program, Program, SyntaxError};
use crate::pipeline::{ArchFault, CoreState, CpuConfig, Preset, SimError, TraceRecord};
use crate::sidechannel::{
    calibrate_threshold, flush_oracle, reload_and_classify, DecodeSummary, MajorityDecoder,
    SideChannelError, SignalHistogram,
};
use crate::vmem::Asid;

pub use covert::{run_covert_channel, CovertChannelReport, CovertError};
pub use truth_table::{forwarding_truth_table, gate_predicate, preset_gate, TruthRow};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown constant `{{{0}}}`")]
    UnknownConstant(String),
    #[error("override for undeclared constant `{0}`")]
    UnknownOverride(String),
    #[error("constant `{name}`: empty range [{lo}, {hi}]")]
    EmptyRange { name: String, lo: u64, hi: u64 },
    #[error("thread {thread} program, {source}")]
    Program { thread: usize, source: SyntaxError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    SideChannel(#[from] SideChannelError),
    #[error("{}: expected {}, observed {}", .0.name, .0.expected, .0.verdict)]
    ExpectationViolated(Box<ScenarioResult>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    /// The planted value is the only hot slot.
    Leak,
    /// No hot slot. Faults are allowed.
    NoLeak,
    /// No hot slot and at least one architectural fault.
    FaultOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Leak,
    NoLeak,
    FaultOnly,
    /// Hot slots other than exactly the planted value.
    Noise,
}

impl Expected {
    pub fn accepts(self, verdict: Verdict) -> bool {
        matches!(
            (self, verdict),
            (Expected::Leak, Verdict::Leak)
                | (Expected::NoLeak, Verdict::NoLeak | Verdict::FaultOnly)
                | (Expected::FaultOnly, Verdict::FaultOnly)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Expected::Leak => "leak",
            Expected::NoLeak => "no_leak",
            Expected::FaultOnly => "fault_only",
        }
    }
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Leak => "leak",
            Verdict::NoLeak => "no_leak",
            Verdict::FaultOnly => "fault_only",
            Verdict::Noise => "noise",
        }
    }
}

impl std::fmt::Display for Expected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
enum ConstSpec {
    Fixed(Hex),
    Random { random: [u64; 2] },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    /// Value the signal must encode for a leak.
    pub value: Hex,
    pub outcome: Expected,
    /// Per-preset exceptions to `outcome`.
    #[serde(default)]
    pub outcomes: BTreeMap<Preset, Expected>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    #[serde(default)]
    pub context: Asid,
    pub program: String,
}

fn default_rounds() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub window_cycles: Option<u64>,
    #[serde(default, rename = "constants")]
    _constants: toml::Table,
    pub expect: Expectation,
    #[serde(default)]
    pub oracle: OracleSpec,
    pub memory: Vec<MemoryRegion>,
    #[serde(default)]
    pub preload: Vec<Preload>,
    pub threads: Vec<ThreadSpec>,
}

fn default_preset() -> Preset {
    Preset::Zen
}

/// Scenario source text before constants are bound.
#[derive(Debug, Clone)]
pub struct ScenarioTemplate {
    pub name: String,
    source: Cow<'static, str>,
}

/// A scenario with constants bound and programs assembled.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub constants: BTreeMap<String, u64>,
    pub programs: Vec<Program>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub name: String,
    pub preset: Preset,
    pub seed: u64,
    pub value: u64,
    pub expected: Expected,
    pub verdict: Verdict,
    pub passed: bool,
    pub hot_slots: Vec<usize>,
    pub decode: DecodeSummary,
    pub fault_records: Vec<ArchFault>,
    pub cycles: u64,
    /// Probe pass of the last round.
    #[serde(skip)]
    pub signal: SignalHistogram,
    /// Micro-op trace of the last round.
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

const CATALOG: &[(&str, &str)] = &[
    ("noncanon_l1d", include_str!("catalog/noncanon_l1d.toml")),
    ("noncanon_stlf", include_str!("catalog/noncanon_stlf.toml")),
    (
        "noncanon_stlf_flushed",
        include_str!("catalog/noncanon_stlf_flushed.toml"),
    ),
    (
        "stlf_12bit_only",
        include_str!("catalog/stlf_12bit_only.toml"),
    ),
    (
        "meltdown_kernel",
        include_str!("catalog/meltdown_kernel.toml"),
    ),
    (
        "cross_address_space",
        include_str!("catalog/cross_address_space.toml"),
    ),
    (
        "cross_thread_shared_as",
        include_str!("catalog/cross_thread_shared_as.toml"),
    ),
    (
        "sandbox_gadget",
        include_str!("catalog/sandbox_gadget.toml"),
    ),
];

/// Every built-in scenario, in a fixed order.
pub fn catalog() -> Vec<ScenarioTemplate> {
    CATALOG
        .iter()
        .map(|&(name, source)| ScenarioTemplate {
            name: name.to_string(),
            source: Cow::Borrowed(source),
        })
        .collect()
}

pub fn find(name: &str) -> Option<ScenarioTemplate> {
    catalog().into_iter().find(|t| t.name == name)
}

/// Replaces `{NAME}` (an upper-case identifier in braces) by the constant's
/// value. Other braces are left alone.
pub fn substitute(text: &str, constants: &BTreeMap<String, u64>) -> Result<String, ScenarioError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let ident = &after[..ident_len];
        let is_placeholder = after[ident_len..].starts_with('}')
            && ident.starts_with(|c: char| c.is_ascii_uppercase())
            && ident
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        if is_placeholder {
            let value = constants
                .get(ident)
                .ok_or_else(|| ScenarioError::UnknownConstant(ident.to_string()))?;
            out.push_str(&format!("{value:#x}"));
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl ScenarioTemplate {
    pub fn from_toml(source: impl Into<String>) -> Result<Self, ScenarioError> {
        let source = source.into();
        let table: toml::Table = source.parse()?;
        let name = table
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ScenarioError::Invalid("scenario has no `name`".into()))?
            .to_string();
        Ok(ScenarioTemplate {
            name,
            source: Cow::Owned(source),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Declared constants in name order, with random ones drawn from `seed`
    /// and `overrides` applied last.
    pub fn bind_constants(
        &self,
        seed: u64,
        overrides: &BTreeMap<String, u64>,
    ) -> Result<BTreeMap<String, u64>, ScenarioError> {
        #[derive(Deserialize)]
        struct Header {
            #[serde(default)]
            constants: BTreeMap<String, ConstSpec>,
        }
        let header: Header = toml::from_str(&self.source)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bound = BTreeMap::new();
        for (name, spec) in header.constants {
            let value = match spec {
                ConstSpec::Fixed(v) => v.0,
                ConstSpec::Random { random: [lo, hi] } => {
                    if lo > hi {
                        return Err(ScenarioError::EmptyRange { name, lo, hi });
                    }
                    rng.random_range(lo..=hi)
                }
            };
            bound.insert(name, value);
        }
        for (name, &value) in overrides {
            match bound.get_mut(name) {
                Some(slot) => *slot = value,
                None => return Err(ScenarioError::UnknownOverride(name.clone())),
            }
        }
        Ok(bound)
    }

    pub fn instantiate(
        &self,
        seed: u64,
        overrides: &BTreeMap<String, u64>,
    ) -> Result<Scenario, ScenarioError> {
        let constants = self.bind_constants(seed, overrides)?;
        let text = substitute(&self.source, &constants)?;
        let spec: ScenarioSpec = toml::from_str(&text)?;
        if spec.threads.is_empty() || spec.threads.len() > 2 {
            return Err(ScenarioError::Invalid(format!(
                "{}: {} threads, expected 1 or 2",
                spec.name,
                spec.threads.len()
            )));
        }
        if spec.rounds == 0 {
            return Err(ScenarioError::Invalid(format!(
                "{}: rounds must be at least 1",
                spec.name
            )));
        }
        let programs = spec
            .threads
            .iter()
            .enumerate()
            .map(|(thread, t)| {
                parse_program(&t.program)
                    .map_err(|source| ScenarioError::Program { thread, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Scenario {
            spec,
            constants,
            programs,
        })
    }
}

impl Scenario {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.spec.preset = preset;
        self
    }

    pub fn expected(&self) -> Expected {
        let e = &self.spec.expect;
        e.outcomes
            .get(&self.spec.preset)
            .copied()
            .unwrap_or(e.outcome)
    }

    pub fn cpu_config(&self, seed: u64) -> CpuConfig {
        let mut config = CpuConfig::with_preset(self.spec.preset);
        config.seed = seed;
        config.smt_contexts = self.spec.threads.len();
        if let Some(w) = self.spec.window_cycles {
            config.window_cycles = w;
        }
        config
    }

    /// Runs the scenario without judging the outcome.
    pub fn execute(&self, seed: u64) -> Result<ScenarioResult, ScenarioError> {
        self.execute_with(self.cpu_config(seed), seed)
    }

    pub fn execute_with(
        &self,
        config: CpuConfig,
        seed: u64,
    ) -> Result<ScenarioResult, ScenarioError> {
        let spec = &self.spec;
        let oracle = spec.oracle.array()?;
        let mut core = CoreState::new(config, build_page_table(&spec.memory)?)?;
        let threshold = calibrate_threshold(&mut core)?;
        let mut decoder = MajorityDecoder::new();
        let mut faults = Vec::new();
        let mut trace = Vec::new();
        let mut signal = None;
        for round in 0..spec.rounds {
            apply_preloads(&mut core, &spec.preload)?;
            flush_oracle(&mut core, spec.oracle.context, &oracle)?;
            for (thread, (t, program)) in spec.threads.iter().zip(&self.programs).enumerate() {
                core.load_program(thread, program.clone(), t.context)?;
            }
            core.run()?;
            faults.extend(core.take_faults());
            trace = core.take_trace();
            let order_seed = probe_seed(seed, u64::from(round));
            let h = reload_and_classify(
                &mut core,
                spec.oracle.context,
                &oracle,
                threshold,
                order_seed,
            )?;
            decoder.add(&h);
            signal = Some(h);
        }
        let hot_slots = decoder.majority_slots();
        let value = spec.expect.value.0;
        let verdict = match hot_slots[..] {
            [] if faults.is_empty() => Verdict::NoLeak,
            [] => Verdict::FaultOnly,
            [slot] if slot as u64 == value => Verdict::Leak,
            _ => Verdict::Noise,
        };
        let expected = self.expected();
        Ok(ScenarioResult {
            name: spec.name.clone(),
            preset: spec.preset,
            seed,
            value,
            expected,
            verdict,
            passed: expected.accepts(verdict),
            hot_slots,
            decode: decoder.decode(),
            fault_records: faults,
            cycles: core.cycle(),
            signal: signal.expect("at least one round"),
            trace,
        })
    }
}

/// Seed of the probe permutation for one round.
pub(crate) fn probe_seed(seed: u64, round: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(round)
}

/// Runs `scenario` and fails with `ExpectationViolated` unless the verdict
/// matches the expectation for its preset.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<ScenarioResult, ScenarioError> {
    let result = scenario.execute(seed)?;
    if result.passed {
        Ok(result)
    } else {
        Err(ScenarioError::ExpectationViolated(Box::new(result)))
    }
}
