//! Command-line front end.
//!
//! Exit codes: 0 success, 1 parse or usage error, 2 configuration error,
//! 3 runtime failure or failed expectation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};
use crate::isa::{disassemble, listings, parse_program};
use crate::pipeline::{write_cache_csv, write_jsonl, Preset};
use crate::scenarios::{
    self, forwarding_truth_table, run_covert_channel, CovertError, ScenarioError, ScenarioResult,
};
use crate::sidechannel::{
    calibrate_threshold, flush_oracle, reload_and_classify, SideChannelError,
};

pub const CONFIG_ENV: &str = "NCSIM_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "ncsim",
    version,
    about = "Non-canonical address forwarding simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML). Defaults apply when absent.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble and run programs, one per hardware thread, then reload the oracle.
    Run {
        #[arg(required = true, num_args = 1..=2)]
        programs: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run catalog scenarios and check their expected outcomes.
    Scenarios {
        /// Glob over scenario names.
        #[arg(long, default_value = "*")]
        filter: String,
        /// Seeds 0..N per scenario.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Preset to run on instead of each scenario's own.
        #[arg(long)]
        preset: Option<Preset>,
        /// Constant override, NAME=VALUE. Repeatable.
        #[arg(long = "set", value_name = "NAME=VALUE")]
        overrides: Vec<String>,
        /// Directory for per-run JSON results and signal CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Send a file through the covert channel and report errors and bandwidth.
    Covert {
        #[arg(long)]
        payload: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Transmissions per byte, decoded by majority.
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        /// Directory to write `covert.json` to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the Flush+Reload threshold for a configuration.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Check the 16-row forwarding truth table against the gate predicate.
    TruthTable {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print the store / alias-load / oracle-touch program for a byte.
    Listing2 {
        #[arg(long, default_value = "0x2a", value_parser = parse_byte)]
        secret: u8,
        #[arg(long, default_value_t = 0)]
        offset: u16,
    },
}

fn parse_byte(s: &str) -> Result<u8, String> {
    crate::isa::parse_u64(s)
        .and_then(|v| u8::try_from(v).ok())
        .ok_or_else(|| format!("`{s}` is not a byte"))
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(format!("config error: {e}"))
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    match &arg.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn side_channel(e: SideChannelError) -> Failure {
    match e {
        SideChannelError::CalibrationFailed { .. } => Failure::runtime(e.to_string()),
        _ => Failure::config(format!("config error: {e}")),
    }
}

fn cmd_run(
    programs: &[PathBuf],
    config: &ConfigArg,
    out: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    let mut parsed = Vec::new();
    for path in programs {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let program =
            parse_program(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        parsed.push(program);
    }
    cfg.smt_contexts = cfg.smt_contexts.max(parsed.len());
    let mut core = cfg.build_core()?;
    let oracle = cfg.oracle.array()?;
    let asid = cfg.oracle.context;
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => calibrate_threshold(&mut core).map_err(side_channel)?,
    };
    flush_oracle(&mut core, asid, &oracle).map_err(side_channel)?;
    if cfg.output.cache_events.is_some() {
        core.record_cache_events(true);
    }
    for (thread, program) in parsed.into_iter().enumerate() {
        core.load_program(thread, program, 0)
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    let cycles = core
        .run()
        .map_err(|e| Failure::runtime(format!("runtime error: {e}")))?;
    let signal =
        reload_and_classify(&mut core, asid, &oracle, threshold, cfg.seed).map_err(side_channel)?;

    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    create_dir(&dir)?;
    let mut trace = Vec::new();
    write_jsonl(&mut trace, core.trace()).expect("in-memory write");
    write_file(&dir.join(&cfg.output.trace), &trace)?;
    write_file(&dir.join(&cfg.output.signal), signal.to_csv().as_bytes())?;
    let mut faults = serde_json::to_vec_pretty(core.faults()).expect("faults serialize");
    faults.push(b'\n');
    write_file(&dir.join(&cfg.output.faults), &faults)?;
    if let Some(name) = &cfg.output.cache_events {
        let mut csv = Vec::new();
        write_cache_csv(&mut csv, core.cache_events()).expect("in-memory write");
        write_file(&dir.join(name), &csv)?;
    }
    let _ = writeln!(
        stdout,
        "halted after {cycles} cycles, {} fault(s), hot slots {:?} (threshold {threshold})",
        core.faults().len(),
        signal.hot_slots
    );
    Ok(())
}

fn parse_overrides(items: &[String]) -> Result<BTreeMap<String, u64>, Failure> {
    items
        .iter()
        .map(|item| {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects NAME=VALUE, got `{item}`")))?;
            let value = crate::isa::parse_u64(value)
                .ok_or_else(|| Failure::usage(format!("--set {name}: bad number `{value}`")))?;
            Ok((name.trim().to_string(), value))
        })
        .collect()
}

fn result_file_stem(r: &ScenarioResult) -> String {
    format!("{}.{}.seed{}", r.name, r.preset, r.seed)
}

fn cmd_scenarios(
    filter: &str,
    seeds: u64,
    preset: Option<Preset>,
    overrides: &[String],
    out: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let pattern = glob::Pattern::new(filter)
        .map_err(|e| Failure::usage(format!("bad --filter `{filter}`: {e}")))?;
    let overrides = parse_overrides(overrides)?;
    let templates: Vec<_> = scenarios::catalog()
        .into_iter()
        .filter(|t| pattern.matches(&t.name))
        .collect();
    if templates.is_empty() {
        let _ = writeln!(stdout, "0 scenarios match `{filter}`");
        return Ok(());
    }
    let jobs: Vec<_> = templates
        .iter()
        .flat_map(|t| (0..seeds).map(move |seed| (t, seed)))
        .collect();
    let results: Vec<Result<ScenarioResult, ScenarioError>> = jobs
        .par_iter()
        .map(|&(t, seed)| {
            let mut s = t.instantiate(seed, &overrides)?;
            if let Some(p) = preset {
                s = s.with_preset(p);
            }
            s.execute(seed)
        })
        .collect();
    let results = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::config(format!("scenario error: {e}")))?;

    if let Some(dir) = &out {
        create_dir(dir)?;
        for r in &results {
            let stem = result_file_stem(r);
            let csv_name = format!("{stem}.csv");
            write_file(&dir.join(&csv_name), r.signal.to_csv().as_bytes())?;
            let json = serde_json::json!({
                "name": r.name,
                "preset": r.preset,
                "seed": r.seed,
                "verdict": r.verdict,
                "expected": r.expected,
                "passed": r.passed,
                "value": r.value,
                "hot_slots": r.hot_slots,
                "decode": r.decode,
                "cycles": r.cycles,
                "signal_csv_path": csv_name,
                "fault_records": r.fault_records,
            });
            let mut bytes = serde_json::to_vec_pretty(&json).expect("result serializes");
            bytes.push(b'\n');
            write_file(&dir.join(format!("{stem}.json")), &bytes)?;
        }
    }

    let _ = writeln!(
        stdout,
        "{:<24} {:<14} {:>5}  {:<11} {:<11} status",
        "scenario", "preset", "seed", "expected", "observed"
    );
    for r in &results {
        let _ = writeln!(
            stdout,
            "{:<24} {:<14} {:>5}  {:<11} {:<11} {}",
            r.name,
            r.preset.name(),
            r.seed,
            r.expected.name(),
            r.verdict.name(),
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    let _ = writeln!(
        stdout,
        "{} scenario run(s), {} passed, {} failed",
        results.len(),
        results.len() - failed.len(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<_> = failed
            .iter()
            .map(|r| format!("{} (seed {})", r.name, r.seed))
            .collect();
        Err(Failure::runtime(format!("failed: {}", names.join(", "))))
    }
}

fn cmd_covert(
    payload: &Path,
    config: &ConfigArg,
    rounds: u32,
    out: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let bytes =
        fs::read(payload).map_err(|e| Failure::usage(format!("{}: {e}", payload.display())))?;
    if bytes.is_empty() {
        return Err(Failure::usage(format!(
            "{}: payload is empty",
            payload.display()
        )));
    }
    let cfg = load_config(config)?;
    let (report, failure) = match run_covert_channel(&bytes, &cfg, rounds) {
        Ok(r) => (r, None),
        Err(CovertError::ChannelBroken(r)) => {
            let msg = format!(
                "channel broken: {} of {} bytes wrong",
                r.errors, r.payload_bytes
            );
            (*r, Some(Failure::runtime(msg)))
        }
        Err(CovertError::EmptyPayload | CovertError::NoRounds) => {
            return Err(Failure::usage(
                "payload must be non-empty and rounds at least 1",
            ))
        }
        Err(CovertError::Config(e)) => return Err(e.into()),
        Err(CovertError::SideChannel(e)) => return Err(side_channel(e)),
        Err(e) => return Err(Failure::runtime(e.to_string())),
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    let _ = stdout.write_all(&json);
    if let Some(dir) = out {
        create_dir(&dir)?;
        write_file(&dir.join("covert.json"), &json)?;
    }
    failure.map_or(Ok(()), Err)
}

fn cmd_calibrate(config: &ConfigArg, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    cfg.cache
        .validate()
        .map_err(|e| Failure::config(format!("config error: {e}")))?;
    let mut core = cfg.build_core()?;
    let threshold = calibrate_threshold(&mut core).map_err(side_channel)?;
    let _ = writeln!(stdout, "{threshold}");
    Ok(())
}

fn cmd_truth_table(config: &ConfigArg, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let rows =
        forwarding_truth_table(&cfg.cpu_config()).map_err(|e| Failure::runtime(e.to_string()))?;
    let _ = writeln!(
        stdout,
        "tlb_hit,permission_ok,l1d_resident,sq_match,flowed,predicted"
    );
    let b = |v: bool| u8::from(v);
    for r in &rows {
        let _ = writeln!(
            stdout,
            "{},{},{},{},{},{}",
            b(r.tlb_hit),
            b(r.permission_ok),
            b(r.l1d_resident),
            b(r.sq_match),
            b(r.flowed),
            b(r.predicted)
        );
    }
    let mismatches = rows.iter().filter(|r| r.flowed != r.predicted).count();
    if mismatches == 0 {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{mismatches} row(s) differ from the predicate"
        )))
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            programs,
            config,
            out,
        } => cmd_run(&programs, &config, out, stdout),
        Command::Scenarios {
            filter,
            seeds,
            preset,
            overrides,
            out,
        } => cmd_scenarios(&filter, seeds, preset, &overrides, out, stdout),
        Command::Covert {
            payload,
            config,
            rounds,
            out,
        } => cmd_covert(&payload, &config, rounds, out, stdout),
        Command::Calibrate { config } => cmd_calibrate(&config, stdout),
        Command::TruthTable { config } => cmd_truth_table(&config, stdout),
        Command::Listing2 { secret, offset } => {
            if offset >= 4096 {
                return Err(Failure::usage("--offset must be below 4096"));
            }
            let _ = writeln!(
                stdout,
                "{}",
                disassemble(&listings::encode_listing2(secret, offset))
            );
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

pub fn main() -> ExitCode {
    let code = run(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(code)
}
