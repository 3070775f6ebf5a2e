use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Candidate;
use crate::engines::EngineStack;
use crate::run::{run, Mode, ModelSource, Workload};
use crate::units::NS_PER_S;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step_time_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot_us: Option<f64>,
    /// Output tokens per second per device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps_per_gpu: Option<f64>,
    /// Output tokens per second seen by one sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps_per_user: Option<f64>,
    pub peak_mem: u64,
    pub mfu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub candidate: Candidate,
    pub metrics: Metrics,
    pub feasible: bool,
    /// Violated constraint of an infeasible point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl EvalPoint {
    fn failed(candidate: &Candidate, reason: String) -> Self {
        EvalPoint { candidate: candidate.clone(), metrics: Metrics::default(), feasible: false, reason: Some(reason) }
    }
}

/// The workload `base` specialized to candidate `c`.
pub fn candidate_workload(c: &Candidate, base: &Workload) -> Workload {
    let mut w = base.clone();
    w.parallel = c.parallel.clone();
    if let ModelSource::Config(m) = &mut w.model {
        m.batch = c.batch;
    }
    if c.prefill_chunk.is_some() {
        w.prefill_chunk = c.prefill_chunk;
    }
    w
}

/// Simulates one candidate. Points whose reserved memory exceeds device
/// capacity are infeasible with reason `memory`; configurations the model
/// cannot be split into are infeasible with the error text.
pub fn evaluate(c: &Candidate, base: &Workload, stack: &EngineStack) -> EvalPoint {
    let w = candidate_workload(c, base);
    let out = match run(&w, stack) {
        Ok(o) => o,
        Err(e) => return EvalPoint::failed(c, format!("error: {e}")),
    };
    let r = &out.report;
    let mut m = Metrics {
        step_time_us: r.step_time_us,
        ttft_us: r.ttft_us,
        tpot_us: r.tpot_us,
        tps_per_gpu: None,
        tps_per_user: None,
        peak_mem: r.memory.max_reserved,
        mfu: r.mfu,
    };
    if let (Some(tpot), Mode::Decode | Mode::Serve) = (r.tpot_us, w.mode) {
        if tpot > 0.0 {
            let per_user = NS_PER_S / (tpot * 1e3);
            m.tps_per_user = Some(per_user);
            m.tps_per_gpu = Some(c.batch as f64 * per_user / c.world as f64);
        }
    }
    let fits = (r.memory.max_reserved as f64) <= stack.hw.mem_capacity;
    EvalPoint { candidate: c.clone(), metrics: m, feasible: fits, reason: (!fits).then(|| "memory".into()) }
}

/// Inference throughput coordinates (TPS per GPU, TPS per user) of the
/// feasible points that have both.
pub fn throughput_points(points: &[EvalPoint]) -> Vec<(usize, (f64, f64))> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.feasible)
        .filter_map(|(i, p)| Some((i, (p.metrics.tps_per_gpu?, p.metrics.tps_per_user?))))
        .collect()
}
