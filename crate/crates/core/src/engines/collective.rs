//! Closed-form collective costs over a tiered topology, with the per-link
//! traffic each collective puts on the network.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{HardwareSpec, TierKind};
use crate::graph::OpKind;
use crate::sched::{LinkId, LinkUse};
use crate::units::s_to_ns;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveAlgo {
    #[default]
    Ring,
    Tree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    SendRecv,
}

impl CollectiveKind {
    pub fn of(kind: &OpKind) -> Option<Self> {
        Some(match kind {
            OpKind::AllReduce => CollectiveKind::AllReduce,
            OpKind::AllGather => CollectiveKind::AllGather,
            OpKind::ReduceScatter => CollectiveKind::ReduceScatter,
            OpKind::AllToAll => CollectiveKind::AllToAll,
            OpKind::Send | OpKind::Recv => CollectiveKind::SendRecv,
            _ => return None,
        })
    }
}

/// Cost of one collective: total time, the part spent in handshakes, and
/// the bytes it moves over each link.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommCost {
    pub ns: f64,
    pub latency_ns: f64,
    pub links: Vec<LinkUse>,
}

fn ceil_log2(p: u64) -> u64 {
    if p <= 1 {
        0
    } else {
        64 - u64::from((p - 1).leading_zeros())
    }
}

/// `(handshake steps, transfer seconds)` of a collective over `p` ranks of
/// one tier with payload `s` bytes and per-link bandwidth `b`.
fn terms(kind: CollectiveKind, algo: CollectiveAlgo, tier: TierKind, p: u64, s: f64, b: f64, links: f64) -> (f64, f64) {
    if p <= 1 {
        return (0.0, 0.0);
    }
    let pf = p as f64;
    match kind {
        CollectiveKind::AllReduce => match algo {
            CollectiveAlgo::Ring => (2.0 * (pf - 1.0), 2.0 * (pf - 1.0) * s / (pf * b)),
            CollectiveAlgo::Tree => {
                let k = 2.0 * ceil_log2(p) as f64;
                (k, k * s / b)
            }
        },
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => (pf - 1.0, (pf - 1.0) * s / (pf * b)),
        CollectiveKind::AllToAll => match tier {
            TierKind::Ring => (pf - 1.0, (pf - 1.0) * s / (pf * b)),
            TierKind::Switch => (1.0, (pf - 1.0) * s / (pf * b * links)),
            TierKind::Mesh => (1.0, s / (pf * b)),
        },
        CollectiveKind::SendRecv => (1.0, s / b),
    }
}

/// Closed-form time in seconds of a collective over `p` ranks of a single
/// tier with handshake latency `alpha` (s) and bandwidth `b` (bytes/s).
pub fn closed_form(kind: CollectiveKind, algo: CollectiveAlgo, tier: TierKind, p: u64, bytes: f64, alpha: f64, b: f64) -> f64 {
    let (steps, transfer) = terms(kind, algo, tier, p, bytes, b, 1.0);
    steps * alpha + transfer
}

/// Endpoint id of `rank` inside tier `ti`: the rank itself at level 0,
/// otherwise the lower-level tier holding it.
fn endpoint(hw: &HardwareSpec, ti: usize, rank: u32) -> u32 {
    let level = hw.topology[ti].level;
    if level == 0 {
        rank
    } else {
        hw.tier_of(rank, level - 1).map(|i| i as u32).unwrap_or(rank)
    }
}

const PORT: u32 = u32::MAX;

/// Links used by a phase on tier `ti`, each carrying `rate` bytes/ns for `ns`.
fn phase_links(hw: &HardwareSpec, ti: usize, ranks: &[u32], kind: CollectiveKind, rate: f64, ns: f64) -> Vec<LinkUse> {
    let tier = &hw.topology[ti];
    let cap = tier.bandwidth * f64::from(tier.links_per_node) / 1e9;
    let mut order: Vec<u32> = Vec::new();
    for &m in &tier.members {
        let e = endpoint(hw, ti, m);
        if !order.contains(&e) {
            order.push(e);
        }
    }
    let wanted: BTreeSet<u32> = ranks.iter().map(|&r| endpoint(hw, ti, r)).collect();
    let eps: Vec<u32> = if kind == CollectiveKind::SendRecv {
        ranks.iter().map(|&r| endpoint(hw, ti, r)).collect()
    } else {
        order.iter().copied().filter(|e| wanted.contains(e)).collect()
    };
    if wanted.len() < 2 || ns <= 0.0 {
        return Vec::new();
    }
    let id = |a: u32, b: u32| LinkId { tier: ti as u32, a, b };
    let mut used: Vec<LinkId> = Vec::new();
    let hops: Vec<(u32, u32)> = if kind == CollectiveKind::SendRecv {
        alloc::vec![(eps[0], eps[1])]
    } else if kind == CollectiveKind::AllToAll && tier.kind == TierKind::Mesh {
        eps.iter().flat_map(|&a| eps.iter().filter(move |&&b| b != a).map(move |&b| (a, b))).collect()
    } else {
        (0..eps.len()).map(|i| (eps[i], eps[(i + 1) % eps.len()])).collect()
    };
    match tier.kind {
        TierKind::Ring => {
            let n = order.len();
            let at = |e: u32| order.iter().position(|x| *x == e).unwrap();
            for (a, b) in hops {
                let mut i = at(a);
                while order[i] != b {
                    let j = (i + 1) % n;
                    used.push(id(order[i], order[j]));
                    i = j;
                }
            }
        }
        TierKind::Mesh => used.extend(hops.into_iter().map(|(a, b)| id(a, b))),
        TierKind::Switch => {
            for (a, b) in hops {
                used.push(id(a, PORT));
                used.push(id(PORT, b));
            }
        }
    }
    used.sort();
    used.dedup();
    used.into_iter().map(|link| LinkUse { link, bytes: rate.min(cap) * ns, capacity: cap }).collect()
}

fn merge(into: &mut BTreeMap<LinkId, LinkUse>, links: Vec<LinkUse>) {
    for u in links {
        into.entry(u.link).and_modify(|x| x.bytes += u.bytes).or_insert(u);
    }
}

fn flat(hw: &HardwareSpec, ti: usize, kind: CollectiveKind, algo: CollectiveAlgo, ranks: &[u32], p: u64, bytes: f64, b: f64, rate_mult: f64) -> CommCost {
    let t = &hw.topology[ti];
    let links = f64::from(t.links_per_node);
    let (steps, transfer) = terms(kind, algo, t.kind, p, bytes, b, links);
    let transfer_ns = s_to_ns(transfer);
    let rate = if kind == CollectiveKind::AllToAll && t.kind == TierKind::Switch { b * links } else { b * rate_mult } / 1e9;
    CommCost {
        ns: s_to_ns(steps * t.alpha) + transfer_ns,
        latency_ns: s_to_ns(steps * t.alpha),
        links: phase_links(hw, ti, ranks, kind, rate, transfer_ns),
    }
}

/// Prices a collective among `group` (global ranks) moving `bytes`.
///
/// A group inside one innermost tier uses that tier's closed form. A group
/// spanning lower-level tiers runs reduce_scatter inside each, the
/// collective across them on `bytes / local` (with `local` parallel streams
/// sharing `links_per_node` links), then all_gather inside each.
pub fn collective_time(kind: CollectiveKind, algo: CollectiveAlgo, group: &[u32], bytes: f64, hw: &HardwareSpec) -> Result<CommCost> {
    let uniq: BTreeSet<u32> = group.iter().copied().collect();
    if uniq.len() != group.len() {
        return Err(Error::Topology(format!("rank group {group:?} has duplicates")));
    }
    if group.len() <= 1 || bytes < 0.0 {
        return Ok(CommCost::default());
    }
    let ti = hw.enclosing_tier(group)?;
    let tier = &hw.topology[ti];
    if tier.level == 0 || matches!(kind, CollectiveKind::AllToAll | CollectiveKind::SendRecv) {
        return Ok(flat(hw, ti, kind, algo, group, group.len() as u64, bytes, tier.bandwidth, 1.0));
    }
    let mut parts: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for &r in group {
        let sub = hw
            .tier_of(r, tier.level - 1)
            .ok_or_else(|| Error::Topology(format!("rank {r} has no level {} tier", tier.level - 1)))?;
        parts.entry(sub).or_default().push(r);
    }
    let local = parts.values().map(Vec::len).max().unwrap_or(1) as f64;
    let outer_p = parts.len() as u64;
    let b_eff = tier.bandwidth * (f64::from(tier.links_per_node) / local).min(1.0);
    let outer = flat(hw, ti, kind, algo, group, outer_p, bytes / local, b_eff, local);
    let inner = |k: CollectiveKind| -> Result<CommCost> {
        let mut ns = 0.0f64;
        let mut lat = 0.0f64;
        let mut links = BTreeMap::new();
        for members in parts.values() {
            let c = collective_time(k, CollectiveAlgo::Ring, members, bytes, hw)?;
            ns = ns.max(c.ns);
            lat = lat.max(c.latency_ns);
            merge(&mut links, c.links);
        }
        Ok(CommCost { ns, latency_ns: lat, links: links.into_values().collect() })
    };
    let phases = match kind {
        CollectiveKind::AllReduce => alloc::vec![inner(CollectiveKind::ReduceScatter)?, outer, inner(CollectiveKind::AllGather)?],
        CollectiveKind::AllGather => alloc::vec![outer, inner(CollectiveKind::AllGather)?],
        CollectiveKind::ReduceScatter => alloc::vec![inner(CollectiveKind::ReduceScatter)?, outer],
        CollectiveKind::AllToAll | CollectiveKind::SendRecv => unreachable!(),
    };
    let mut links = BTreeMap::new();
    let mut total = CommCost::default();
    for ph in phases {
        total.ns += ph.ns;
        total.latency_ns += ph.latency_ns;
        merge(&mut links, ph.links);
    }
    total.links = links.into_values().collect();
    Ok(total)
}

/// Point-to-point transfer from `src` to `dst`.
pub fn p2p_time(src: u32, dst: u32, bytes: f64, hw: &HardwareSpec) -> Result<CommCost> {
    if src == dst {
        return Ok(CommCost::default());
    }
    let ti = hw.enclosing_tier(&[src, dst])?;
    Ok(flat(hw, ti, CollectiveKind::SendRecv, CollectiveAlgo::Ring, &[src, dst], 2, bytes, hw.topology[ti].bandwidth, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{two_tier, LinkTier};
    use crate::graph::Precision;

    fn ring(p: u32, alpha: f64, b: f64) -> HardwareSpec {
        let mut hw = HardwareSpec::device("t", &[(Precision::Bf16, 1e14)], 2e12);
        hw.topology = alloc::vec![LinkTier { kind: TierKind::Ring, level: 0, members: (0..p).collect(), alpha, bandwidth: b, links_per_node: 1 }];
        hw
    }

    #[test]
    fn ring_links_are_saturated() {
        let hw = ring(4, 5e-6, 1e11);
        let c = collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Ring, &[0, 1, 2, 3], (1u64 << 30) as f64, &hw).unwrap();
        assert_eq!(c.links.len(), 4);
        let transfer = c.ns - c.latency_ns;
        for u in &c.links {
            assert!((u.bytes / transfer - u.capacity).abs() < 1e-9);
        }
    }

    #[test]
    fn sub_ring_crosses_intermediate_links() {
        let hw = ring(4, 0.0, 1e11);
        let c = collective_time(CollectiveKind::AllGather, CollectiveAlgo::Ring, &[0, 2], 1e6, &hw).unwrap();
        assert_eq!(c.links.len(), 4);
    }

    #[test]
    fn hierarchical_all_reduce_composition() {
        let mut hw = HardwareSpec::device("t", &[(Precision::Bf16, 1e14)], 2e12);
        hw.topology = two_tier(4, 2, (TierKind::Ring, 1e-6, 2e11), (5e-6, 2.5e10, 4));
        let s = 64e6;
        let g: Vec<u32> = (0..8).collect();
        let c = collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Ring, &g, s, &hw).unwrap();
        let rs = closed_form(CollectiveKind::ReduceScatter, CollectiveAlgo::Ring, TierKind::Ring, 4, s, 1e-6, 2e11);
        let ar = closed_form(CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Switch, 2, s / 4.0, 5e-6, 2.5e10);
        let expect = s_to_ns(2.0 * rs + ar);
        assert!((c.ns - expect).abs() < 1e-6, "{} vs {expect}", c.ns);
        let ag = collective_time(CollectiveKind::AllGather, CollectiveAlgo::Ring, &g, s, &hw).unwrap();
        let rsc = collective_time(CollectiveKind::ReduceScatter, CollectiveAlgo::Ring, &g, s, &hw).unwrap();
        assert!((ag.ns + rsc.ns - c.ns).abs() < 1e-6);
    }

    #[test]
    fn unmapped_rank_is_topology_error() {
        let hw = ring(4, 0.0, 1e11);
        assert!(matches!(
            collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Ring, &[0, 9], 1.0, &hw),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn switch_all_to_all_single_step() {
        let mut hw = ring(4, 2e-6, 1e11);
        hw.topology[0].kind = TierKind::Switch;
        hw.topology[0].links_per_node = 2;
        let c = collective_time(CollectiveKind::AllToAll, CollectiveAlgo::Ring, &[0, 1, 2, 3], 4e6, &hw).unwrap();
        assert!((c.ns - (2e3 + 3e6 / 2e11 * 1e9)).abs() < 1e-6);
    }
}
