//! Covert channel built on the non-canonical load.
//!
//! The sender encodes one byte per transmission by running the store /
//! alias-load / oracle-touch sequence; the receiver flushes the oracle
//! beforehand and reloads it afterwards. The harness sequences the two, so
//! the only cost measured is simulated cycles.

use serde::Serialize;
use thiserror::Error;

use super::probe_seed;
use crate::config::{ConfigError, RunConfig};
use crate::isa::listings::encode_listing2;
use crate::pipeline::{Preset, SimError};
use crate::sidechannel::{
    calibrate_threshold, flush_oracle, reload_and_classify, MajorityDecoder, SideChannelError,
};

#[derive(Debug, Error)]
pub enum CovertError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("channel broken: {} of {} bytes wrong", .0.errors, .0.payload_bytes)]
    ChannelBroken(Box<CovertChannelReport>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    SideChannel(#[from] SideChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovertChannelReport {
    pub preset: Preset,
    pub seed: u64,
    pub jitter: u64,
    pub rounds: u32,
    pub threshold: u64,
    pub payload_bytes: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// Index of the first byte decoded wrongly.
    pub first_error: Option<usize>,
    pub cycles_total: u64,
    /// Payload bytes per 10^6 simulated cycles.
    pub bandwidth: f64,
}

/// Sends `payload` one byte at a time, `rounds` transmissions per byte,
/// decoding each byte by majority over its rounds. An undecodable byte
/// counts as an error.
pub fn run_covert_channel(
    payload: &[u8],
    config: &RunConfig,
    rounds: u32,
) -> Result<CovertChannelReport, CovertError> {
    if payload.is_empty() {
        return Err(CovertError::EmptyPayload);
    }
    if rounds == 0 {
        return Err(CovertError::NoRounds);
    }
    let mut core = config.build_core()?;
    let oracle = config.oracle.array()?;
    let asid = config.oracle.context;
    let threshold = match config.threshold {
        Some(t) => t,
        None => calibrate_threshold(&mut core)?,
    };
    let start = core.cycle();
    let mut errors = 0;
    let mut first_error = None;
    for (i, &byte) in payload.iter().enumerate() {
        let mut decoder = MajorityDecoder::new();
        for round in 0..rounds {
            flush_oracle(&mut core, asid, &oracle)?;
            core.load_program(0, encode_listing2(byte, 0), asid)?;
            core.run()?;
            core.take_trace();
            core.take_faults();
            let transmission = i as u64 * u64::from(rounds) + u64::from(round);
            let order_seed = probe_seed(config.seed, transmission);
            decoder.add(&reload_and_classify(
                &mut core, asid, &oracle, threshold, order_seed,
            )?);
        }
        if decoder.decode().secret_estimate != Some(byte) {
            errors += 1;
            first_error.get_or_insert(i);
        }
    }
    let cycles_total = core.cycle() - start;
    let report = CovertChannelReport {
        preset: config.preset,
        seed: config.seed,
        jitter: config.cache.jitter,
        rounds,
        threshold,
        payload_bytes: payload.len(),
        errors,
        error_rate: errors as f64 / payload.len() as f64,
        first_error,
        cycles_total,
        bandwidth: payload.len() as f64 * 1e6 / cycles_total as f64,
    };
    if 2 * errors > payload.len() {
        return Err(CovertError::ChannelBroken(Box::new(report)));
    }
    Ok(report)
}
