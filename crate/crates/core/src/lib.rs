//! Operator-level performance model for distributed LLM training and inference.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the operator-graph
//! IR and its generators, the graph pass pipeline, parallelism passes and
//! pipeline schedules, the operator pricing engines, the multi-rank
//! discrete-event scheduler with overlap modeling, metric analyzers, and
//! design-space exploration. File formats, trace output and the CLI live in
//! the companion `opsim` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

extern crate alloc;

mod error;

pub mod analysis;
pub mod dse;
pub mod engines;
pub mod graph;
pub mod parallel;
pub mod passes;
pub mod run;
pub mod sched;
pub mod units;

pub use error::{Error, Result};
