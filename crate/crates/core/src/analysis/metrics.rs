use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engines::{node_precision, HardwareSpec};
use crate::graph::{OperatorGraph, Phase, Precision, TensorRole};
use crate::sched::{busy_time, ranks, Stream, Timeline, TimelineEntry};
use crate::units::NS_PER_S;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub model_flops: f64,
    pub mfu: f64,
    pub precision: Precision,
}

/// Precision carrying most of the graph's FLOPs.
pub fn model_precision(g: &OperatorGraph) -> Result<Precision> {
    let index = g.index();
    let flops = g.node_flops()?;
    let mut by: BTreeMap<Precision, u64> = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let ins = g.input_metas(&index, i)?;
        if flops[i] > 0 {
            *by.entry(node_precision(n, &ins)).or_insert(0) += flops[i];
        }
    }
    let fallback = g.inputs.iter().find(|i| i.meta.role == TensorRole::Weight).or(g.inputs.first()).map(|i| i.meta.dtype);
    Ok(by.into_iter().max_by_key(|&(p, f)| (f, core::cmp::Reverse(p))).map(|(p, _)| p).or(fallback).unwrap_or(Precision::Bf16))
}

/// Model FLOPs utilization of `makespan_ns` for `model_flops` of work at
/// `precision` spread over `world` devices.
pub fn mfu(model_flops: f64, makespan_ns: f64, hw: &HardwareSpec, precision: Precision, world: u64) -> Result<f64> {
    if world == 0 {
        return Err(Error::config("world size must be positive"));
    }
    if !(makespan_ns > 0.0) {
        return Ok(0.0);
    }
    let peak = hw.peak(precision)?;
    Ok(model_flops / (makespan_ns / NS_PER_S * peak * world as f64))
}

/// Model FLOPs of `g` (every layer it stands for, recompute clones excluded)
/// against the timeline's makespan. Pass the graph as it was before the
/// recompute pass, scaled to the whole step.
pub fn flops_summary(g: &OperatorGraph, timeline: &Timeline, hw: &HardwareSpec, world: u64) -> Result<FlopsSummary> {
    let flops = g.node_flops()?;
    let own: u64 = g.nodes.iter().zip(&flops).filter(|(n, _)| !n.attr_bool(crate::graph::attr::RECOMPUTE)).map(|(_, f)| f).sum();
    let model_flops = own as f64 * g.block_multiplier.max(1) as f64;
    let precision = model_precision(g)?;
    Ok(FlopsSummary { model_flops, mfu: mfu(model_flops, timeline.makespan_ns, hw, precision, world)?, precision })
}

pub const ATTENTION: &str = "Attention";
pub const FEED_FORWARD: &str = "Feed-Forward";
pub const OTHERS: &str = "Others";
pub const ALL_GATHER: &str = "All-Gather";
pub const REDUCE_SCATTER: &str = "Reduce-Scatter";

/// Maps timeline entries to breakdown rows: first by operator kind, then by
/// block part, else the default row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub by_kind: BTreeMap<String, String>,
    pub by_part: BTreeMap<String, String>,
    pub default: String,
    /// Rows always reported, in order, even when empty.
    pub rows: Vec<String>,
}

impl CategoryMap {
    /// Attention / Feed-Forward / Others / All-Gather / Reduce-Scatter.
    /// Other communication falls into Others.
    pub fn standard() -> Self {
        let kinds = [("all_gather", ALL_GATHER), ("reduce_scatter", REDUCE_SCATTER)];
        let parts = [("attention", ATTENTION), ("ffn", FEED_FORWARD)];
        CategoryMap {
            by_kind: kinds.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            by_part: parts.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            default: OTHERS.into(),
            rows: [ATTENTION, FEED_FORWARD, OTHERS, ALL_GATHER, REDUCE_SCATTER].iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Everything in one row.
    pub fn single(row: &str) -> Self {
        CategoryMap { by_kind: BTreeMap::new(), by_part: BTreeMap::new(), default: row.into(), rows: alloc::vec![row.into()] }
    }

    pub fn category(&self, e: &TimelineEntry) -> &str {
        if let Some(c) = self.by_kind.get(&e.kind) {
            return c;
        }
        if let Some(c) = e.part.as_ref().and_then(|p| self.by_part.get(p)) {
            return c;
        }
        &self.default
    }
}

/// Column of an entry: forward work is `F`, backward and optimizer work `B`.
/// Point-to-point transfers and opaque tasks carry no phase and go to `F`.
pub fn phase_column(e: &TimelineEntry) -> &'static str {
    match e.phase {
        Some(Phase::Backward) | Some(Phase::Optimizer) => "B",
        _ => "F",
    }
}

/// Summed segment durations per (row, column), in nanoseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Breakdown {
    pub fn get(&self, row: &str, col: &str) -> f64 {
        self.cells.get(row).and_then(|r| r.get(col)).copied().unwrap_or(0.0)
    }

    pub fn row_total(&self, row: &str) -> f64 {
        self.cells.get(row).map_or(0.0, |r| r.values().sum())
    }

    pub fn total(&self) -> f64 {
        self.cells.values().flat_map(|r| r.values()).sum()
    }

    /// Renames every column, e.g. `F` to `prefill` for inference runs.
    pub fn relabel(mut self, from: &str, to: &str) -> Self {
        for c in &mut self.columns {
            if c == from {
                *c = to.into();
            }
        }
        for r in self.cells.values_mut() {
            if let Some(v) = r.remove(from) {
                *r.entry(to.into()).or_insert(0.0) += v;
            }
        }
        self
    }
}

/// Sums segment durations by category and phase column. `rank` limits the
/// sum to one rank.
pub fn breakdown(t: &Timeline, map: &CategoryMap, rank: Option<u32>) -> Breakdown {
    let mut b = Breakdown { rows: map.rows.clone(), columns: alloc::vec!["F".into(), "B".into()], cells: BTreeMap::new() };
    for row in &map.rows {
        b.cells.entry(row.clone()).or_default();
    }
    for e in t.entries.iter().filter(|e| rank.is_none_or(|r| e.rank == r)) {
        let row = map.category(e);
        if !b.rows.iter().any(|r| r == row) {
            b.rows.push(row.into());
        }
        *b.cells.entry(row.into()).or_default().entry(phase_column(e).into()).or_insert(0.0) += e.duration_ns();
    }
    b
}

/// Sum of segment durations, the quantity [`breakdown`] partitions.
pub fn busy_sum(t: &Timeline, rank: Option<u32>) -> f64 {
    t.entries.iter().filter(|e| rank.is_none_or(|r| e.rank == r)).map(TimelineEntry::duration_ns).sum()
}

/// Joules drawn at TDP while each rank has any stream busy.
pub fn energy_estimate(t: &Timeline, hw: &HardwareSpec) -> f64 {
    ranks(t).into_iter().map(|r| hw.tdp * busy_time(t, r) / NS_PER_S).sum()
}

/// One Trace Event Format complete event. Times are microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub ph: String,
    pub ts: f64,
    pub dur: f64,
    pub pid: u32,
    pub tid: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceDocument {
    pub trace_events: Vec<TraceEvent>,
}

/// Thread id of a stream: compute is 0, comm stream `k` is `k + 1`.
pub fn stream_tid(s: Stream) -> u32 {
    match s {
        Stream::Compute => 0,
        Stream::Comm(k) => k as u32 + 1,
    }
}

fn us3(ns: f64) -> f64 {
    libm::round(ns) / 1000.0
}

/// Trace events ordered by (rank, stream, start).
pub fn trace_events(t: &Timeline) -> TraceDocument {
    let mut ev: Vec<(u32, u32, f64, u32, TraceEvent)> = t
        .entries
        .iter()
        .map(|e| {
            let tid = stream_tid(e.stream);
            let ts = us3(e.start_ns);
            let dur = (libm::round(e.end_ns) - libm::round(e.start_ns)).max(0.0) / 1000.0;
            (e.rank, tid, e.start_ns, e.seg, TraceEvent { name: e.label.clone(), ph: "X".into(), ts, dur, pid: e.rank, tid })
        })
        .collect();
    ev.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)).then(a.3.cmp(&b.3)));
    TraceDocument { trace_events: ev.into_iter().map(|x| x.4).collect() }
}

/// Aggregated time per operator label prefix (node id without the
/// microbatch and layer suffix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpRow {
    pub name: String,
    pub kind: String,
    pub engine: String,
    pub count: u64,
    pub total_ns: f64,
}

pub fn operator_table(t: &Timeline) -> Vec<OpRow> {
    let mut rows: BTreeMap<(String, String), OpRow> = BTreeMap::new();
    for e in &t.entries {
        let name = match e.label.find(" [") {
            Some(k) => e.label[..k].to_string(),
            None if matches!(e.kind.as_str(), "send" | "recv") => e.kind.clone(),
            None => e.label.clone(),
        };
        let row = rows
            .entry((name.clone(), e.kind.clone()))
            .or_insert_with(|| OpRow { name, kind: e.kind.clone(), engine: e.engine.clone(), count: 0, total_ns: 0.0 });
        row.count += 1;
        row.total_ns += e.duration_ns();
        if row.engine != e.engine && !row.engine.contains(&*e.engine) {
            row.engine.push('+');
            row.engine.push_str(&e.engine);
        }
    }
    let mut v: Vec<OpRow> = rows.into_values().collect();
    v.sort_by(|a, b| b.total_ns.total_cmp(&a.total_ns).then_with(|| a.name.cmp(&b.name)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(rank: u32, stream: Stream, s: f64, e: f64, kind: &str, part: Option<&str>, phase: Option<Phase>) -> TimelineEntry {
        TimelineEntry {
            rank,
            seg: 0,
            stream,
            start_ns: s,
            end_ns: e,
            base_ns: e - s,
            engine: "analytical".into(),
            label: "x".into(),
            kind: kind.into(),
            part: part.map(String::from),
            phase,
            flops: 0,
            bytes: 0,
        }
    }

    fn tl(entries: Vec<TimelineEntry>) -> Timeline {
        let makespan_ns = entries.iter().map(|e| e.end_ns).fold(0.0, f64::max);
        Timeline { entries, makespan_ns, iterations: 1, converged: true }
    }

    #[test]
    fn energy_examples() {
        let mut hw = HardwareSpec::device("d", &[(Precision::Bf16, 1e12)], 1e12);
        assert_eq!(energy_estimate(&Timeline::default(), &hw), 0.0);
        let one = tl(vec![entry(0, Stream::Compute, 0.0, NS_PER_S, "matmul", None, None)]);
        assert_eq!(energy_estimate(&one, &hw), 700.0);
        hw.tdp = 400.0;
        let two = tl(vec![
            entry(0, Stream::Compute, 0.0, 0.5 * NS_PER_S, "matmul", None, None),
            entry(1, Stream::Compute, 0.0, 0.5 * NS_PER_S, "matmul", None, None),
        ]);
        assert_eq!(energy_estimate(&two, &hw), 400.0);
    }

    #[test]
    fn single_row_holds_everything() {
        let t = tl(vec![
            entry(0, Stream::Compute, 0.0, 10.0, "matmul", Some("attention"), Some(Phase::Forward)),
            entry(0, Stream::Comm(0), 2.0, 9.0, "all_gather", None, Some(Phase::Backward)),
        ]);
        let b = breakdown(&t, &CategoryMap::single(OTHERS), None);
        assert_eq!(b.row_total(OTHERS), 17.0);
        assert_eq!(b.total(), busy_sum(&t, None));
        let s = breakdown(&t, &CategoryMap::standard(), None);
        assert_eq!(s.get(ATTENTION, "F"), 10.0);
        assert_eq!(s.get(ALL_GATHER, "B"), 7.0);
        assert_eq!(s.rows.len(), 5);
    }

    #[test]
    fn trace_of_one_segment() {
        assert!(trace_events(&Timeline::default()).trace_events.is_empty());
        let t = tl(vec![entry(0, Stream::Compute, 0.0, 5000.0, "matmul", None, None)]);
        let d = trace_events(&t);
        assert_eq!(d.trace_events.len(), 1);
        let e = &d.trace_events[0];
        assert_eq!((e.ph.as_str(), e.ts, e.dur, e.pid, e.tid), ("X", 0.0, 5.0, 0, 0));
    }
}
