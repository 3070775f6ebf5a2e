//! Link-sharing model for concurrent transfers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A directed physical link (or switch port) of a topology tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId {
    pub tier: u32,
    pub a: u32,
    pub b: u32,
}

/// Traffic a transfer puts on one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkUse {
    pub link: LinkId,
    pub bytes: f64,
    /// Link capacity in bytes per nanosecond.
    pub capacity: f64,
}

/// A transfer: a latency phase that uses no bandwidth, then a byte phase
/// lasting `transfer_ns` when the flow has its links to itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub start_ns: f64,
    pub latency_ns: f64,
    pub transfer_ns: f64,
    pub links: Vec<LinkUse>,
}

impl Flow {
    /// Bytes per nanosecond the flow asks of `u.link` at full speed.
    pub fn demand(&self, u: &LinkUse) -> f64 {
        if self.transfer_ns > 0.0 {
            u.bytes / self.transfer_ns
        } else {
            0.0
        }
    }
}

/// Interval during which a flow progressed at `rate` (fraction of full speed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePiece {
    pub t0: f64,
    pub t1: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowOutcome {
    pub end_ns: Vec<f64>,
    pub pieces: Vec<Vec<RatePiece>>,
    /// Piecewise-constant offered load (sum of demands) per link.
    pub link_load: BTreeMap<LinkId, Vec<(f64, f64, f64)>>,
}

/// Integrates flow progress under proportional sharing: on each link the
/// active flows get `min(1, capacity / total demand)` of their demand, and a
/// flow advances at the smallest share over its links. A flow that never
/// shares a saturated link keeps its nominal duration exactly.
pub fn integrate_flows(flows: &[Flow]) -> Result<FlowOutcome> {
    let mut capacity: BTreeMap<LinkId, f64> = BTreeMap::new();
    for f in flows {
        if !(f.start_ns.is_finite() && f.latency_ns >= 0.0 && f.transfer_ns >= 0.0) {
            return Err(Error::config("flow with invalid timing"));
        }
        for u in &f.links {
            if !(u.capacity > 0.0) {
                return Err(Error::config(format!("link {:?} has no capacity", u.link)));
            }
            let c = capacity.entry(u.link).or_insert(u.capacity);
            *c = c.min(u.capacity);
        }
    }
    let n = flows.len();
    let mut out = FlowOutcome { end_ns: vec![0.0; n], pieces: vec![Vec::new(); n], link_load: BTreeMap::new() };
    let mut remaining: Vec<f64> = flows.iter().map(|f| f.transfer_ns).collect();
    let begin: Vec<f64> = flows.iter().map(|f| f.start_ns + f.latency_ns).collect();
    let mut pending: Vec<usize> = Vec::new();
    for i in 0..n {
        if flows[i].links.is_empty() || flows[i].transfer_ns == 0.0 {
            out.end_ns[i] = begin[i] + flows[i].transfer_ns;
            if flows[i].transfer_ns > 0.0 {
                out.pieces[i].push(RatePiece { t0: begin[i], t1: out.end_ns[i], rate: 1.0 });
            }
        } else {
            pending.push(i);
        }
    }
    pending.sort_by(|&a, &b| begin[a].total_cmp(&begin[b]).then(a.cmp(&b)));
    let mut pending = pending.into_iter().peekable();
    let mut active: Vec<usize> = Vec::new();
    let mut t = f64::NEG_INFINITY;
    loop {
        if active.is_empty() {
            match pending.peek() {
                Some(&i) => t = begin[i],
                None => break,
            }
        }
        while let Some(i) = pending.next_if(|&i| begin[i] <= t) {
            active.push(i);
        }
        let mut load: BTreeMap<LinkId, f64> = BTreeMap::new();
        for &i in &active {
            for u in &flows[i].links {
                *load.entry(u.link).or_insert(0.0) += flows[i].demand(u);
            }
        }
        let rate: Vec<f64> = active
            .iter()
            .map(|&i| {
                flows[i]
                    .links
                    .iter()
                    .map(|u| {
                        let l = load[&u.link];
                        if l <= capacity[&u.link] {
                            1.0
                        } else {
                            capacity[&u.link] / l
                        }
                    })
                    .fold(1.0, f64::min)
            })
            .collect();
        let mut dt = f64::INFINITY;
        for (k, &i) in active.iter().enumerate() {
            dt = dt.min(remaining[i] / rate[k]);
        }
        let next_begin = pending.peek().map(|&i| begin[i]);
        let finishing = next_begin.is_none_or(|nb| t + dt <= nb);
        let t1 = if finishing { t + dt } else { next_begin.unwrap() };
        let step = t1 - t;
        for (link, l) in &load {
            out.link_load.entry(*link).or_default().push((t, t1, *l));
        }
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            out.pieces[i].push(RatePiece { t0: t, t1, rate: rate[k] });
            let done = finishing && remaining[i] / rate[k] <= dt;
            if done {
                remaining[i] = 0.0;
                out.end_ns[i] = t1;
            } else {
                remaining[i] -= rate[k] * step;
                still.push(i);
            }
        }
        active = still;
        t = t1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link() -> LinkId {
        LinkId { tier: 0, a: 0, b: 1 }
    }

    fn flow(start: f64, bytes: f64, bw: f64) -> Flow {
        Flow { start_ns: start, latency_ns: 0.0, transfer_ns: bytes / bw, links: vec![LinkUse { link: link(), bytes, capacity: bw }] }
    }

    #[test]
    fn lone_flow_keeps_its_duration() {
        let o = integrate_flows(&[flow(5.0, 100.0, 2.0)]).unwrap();
        assert_eq!(o.end_ns[0], 55.0);
    }

    #[test]
    fn unequal_pair() {
        let (s, b) = (1000.0, 10.0);
        let o = integrate_flows(&[flow(0.0, 2.0 * s, b), flow(0.0, s, b)]).unwrap();
        assert_eq!(o.end_ns[1], 2.0 * s / b);
        assert_eq!(o.end_ns[0], 3.0 * s / b);
    }

    #[test]
    fn half_demand_flows_do_not_contend() {
        let mut a = flow(0.0, 100.0, 2.0);
        a.transfer_ns = 100.0;
        let mut b = a.clone();
        b.start_ns = 10.0;
        let o = integrate_flows(&[a, b]).unwrap();
        assert_eq!(o.end_ns, [100.0, 110.0]);
    }
}
