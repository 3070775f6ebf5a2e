use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::eval::{throughput_points, EvalPoint};

/// Indices of the points no other point dominates when maximizing both
/// coordinates (domination: `>=` in both, `>` in one). Equal points do not
/// dominate each other. Non-finite points are ignored. Indices ascend.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| points[i].0.is_finite() && points[i].1.is_finite()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(points[b].1.total_cmp(&points[a].1)).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut best_y = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        let x = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == x {
            end += 1;
        }
        // Within equal x the first point has the largest y.
        let gy = points[order[k]].1;
        if gy > best_y {
            keep.extend(order[k..end].iter().copied().filter(|&i| points[i].1 == gy));
            best_y = gy;
        }
        k = end;
    }
    keep.sort_unstable();
    keep
}

/// Frontier of the feasible inference points, as indices into `points`.
pub fn frontier(points: &[EvalPoint]) -> Vec<usize> {
    let tp = throughput_points(points);
    let coords: Vec<(f64, f64)> = tp.iter().map(|(_, c)| *c).collect();
    pareto_frontier(&coords).into_iter().map(|k| tp[k].0).collect()
}

/// Service-level constraints; unset bounds do not constrain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ttft_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tpot_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_tps_per_user: Option<f64>,
}

impl Slo {
    pub fn admits(&self, p: &EvalPoint) -> bool {
        let m = &p.metrics;
        let le = |bound: Option<f64>, v: Option<f64>| bound.is_none_or(|b| v.is_some_and(|v| v <= b));
        p.feasible
            && le(self.max_ttft_us, m.ttft_us)
            && le(self.max_tpot_us, m.tpot_us)
            && self.min_tps_per_user.is_none_or(|b| m.tps_per_user.is_some_and(|v| v >= b))
    }
}

/// The admitted point with the highest TPS per GPU; ties go to the smaller
/// world, then the smaller candidate.
pub fn best_under_slo(points: &[EvalPoint], slo: &Slo) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        let Some(v) = p.metrics.tps_per_gpu.filter(|v| v.is_finite()) else { continue };
        if !slo.admits(p) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let q = &points[b];
                let bv = q.metrics.tps_per_gpu.unwrap();
                v > bv || (v == bv && (p.candidate.world, &p.candidate) < (q.candidate.world, &q.candidate))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
