//! Parallelism transforms and pipeline schedules.

mod config;
mod dp;
mod ep;
pub mod pipeline;
mod tp;

pub use config::{validate_config, Axis, Coords, DpMode, ParallelismConfig, PpSchedule};
pub use dp::{apply_dp, byte_buckets, DpResult, MemoryTags};
pub use ep::{apply_ep, expert_placement};
pub use pipeline::{build_program, slot_schedule, ChainNames, PipelineSpec, ProgramMode, Slot, SlotKind};
pub use tp::{apply_tp, comm_kinds};
