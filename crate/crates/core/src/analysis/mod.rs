//! Metric passes over graphs and timelines: FLOPs and MFU, liveness-based
//! memory, per-category breakdown, energy, and trace events.

mod memory;
mod metrics;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use memory::{
    expand_layers, kv_cache_bytes, memory_timeline, reserved, saved_activation_bytes, weight_gradient_outputs, Component, Lifetime,
    MemoryOptions, MemoryTimeline,
};
pub use metrics::{
    breakdown, busy_sum, energy_estimate, flops_summary, mfu, model_precision, operator_table, phase_column, stream_tid, trace_events,
    Breakdown, CategoryMap, FlopsSummary, OpRow, TraceDocument, TraceEvent, ALL_GATHER, ATTENTION, FEED_FORWARD, OTHERS, REDUCE_SCATTER,
};

/// Rounds nanoseconds to microseconds with three decimals.
pub fn us(ns: f64) -> f64 {
    libm::round(ns) / 1000.0 + 0.0
}

/// Peak memory of the busiest pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryPeaks {
    pub stage: u64,
    pub max_allocated: u64,
    pub max_reserved: u64,
    pub components: BTreeMap<Component, u64>,
}

/// Run summary. Durations are microseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub world: u64,
    pub model_flops: f64,
    pub mfu: f64,
    pub step_time_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot_us: Option<f64>,
    pub exposed_comm_us: f64,
    pub memory: MemoryPeaks,
    pub energy_j: f64,
    /// Rank whose segments the breakdown sums.
    pub breakdown_rank: u32,
    /// Row, then column, in microseconds.
    pub breakdown: BTreeMap<String, BTreeMap<String, f64>>,
    pub breakdown_rows: Vec<String>,
    pub breakdown_columns: Vec<String>,
    pub operators: Vec<OperatorRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorRow {
    pub name: String,
    pub kind: String,
    pub engine: String,
    pub count: u64,
    pub total_us: f64,
}

impl Report {
    pub fn set_breakdown(&mut self, b: &Breakdown) {
        self.breakdown_rows = b.rows.clone();
        self.breakdown_columns = b.columns.clone();
        self.breakdown = b.cells.iter().map(|(r, cols)| (r.clone(), cols.iter().map(|(c, v)| (c.clone(), us(*v))).collect())).collect();
    }

    pub fn set_operators(&mut self, rows: &[OpRow]) {
        self.operators = rows
            .iter()
            .map(|r| OperatorRow { name: r.name.clone(), kind: r.kind.clone(), engine: r.engine.clone(), count: r.count, total_us: us(r.total_ns) })
            .collect();
    }
}
