//! Trace-driven simulation of adaptive downstream prefetching for federated
//! learning under client sampling, update compression, over-commitment and
//! client churn.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: parameter vectors and deterministic RNG streams.
//! - [`compress`]: masking, quantization and low-rank compressors with exact
//!   wire-size accounting and accumulation of consecutive updates.
//! - [`store`]: the server model timeline, accumulated update ranges and the
//!   size profiler.
//! - [`sampling`]: presampling with over-commitment and offline replacement.
//! - [`scheduler`]: round-duration estimation and prefetch scheduling.
//! - [`workload`]: bandwidth/availability traces and the synthetic task.
//! - [`sim`]: the round-driven engine and its metrics.
//! - [`experiment`]: configuration, runs, sweeps and result files.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod error;
pub mod experiment;
pub mod model;
pub mod sampling;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod workload;

pub use error::{Error, Result};

/// Round index. Rounds are numbered from 1 in the engine.
pub type Round = u64;

/// Dense client identifier in `[0, N)`.
pub type ClientId = usize;
