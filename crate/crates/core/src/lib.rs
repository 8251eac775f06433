//! Cycle-stepped simulator of a simplified out-of-order core that
//! reproduces transient forwarding through non-canonical addresses.
//!
//! A load through a non-canonical virtual address hits the TLB entry of the
//! canonical address that shares bits `[47:0]` with it. Until the load
//! retires and faults, dependent micro-ops run on the data it received from
//! L1D or from an uncommitted store, and leave a Flush+Reload footprint.

pub mod cache;
pub mod cli;
pub mod config;
pub mod isa;
pub mod pipeline;
pub mod scenarios;
pub mod sidechannel;
pub mod vmem;
