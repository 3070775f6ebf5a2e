use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::program::Stream;
use crate::graph::Phase;

/// One executed segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub rank: u32,
    /// Index into the rank's segment list.
    pub seg: u32,
    pub stream: Stream,
    pub start_ns: f64,
    pub end_ns: f64,
    /// Duration before overlap slowdowns.
    pub base_ns: f64,
    pub engine: String,
    pub label: String,
    /// Operator kind, or `send` / `recv` / `task`.
    pub kind: String,
    pub part: Option<String>,
    pub phase: Option<Phase>,
    pub flops: u64,
    pub bytes: u64,
}

impl TimelineEntry {
    pub fn duration_ns(&self) -> f64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
    pub makespan_ns: f64,
    /// Simulation passes run by the overlap fixpoint.
    pub iterations: usize,
    pub converged: bool,
}

impl Timeline {
    pub fn rank_entries(&self, rank: u32) -> impl Iterator<Item = &TimelineEntry> {
        self.entries.iter().filter(move |e| e.rank == rank)
    }
}
