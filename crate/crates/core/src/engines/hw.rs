use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Precision;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierKind {
    Ring,
    Switch,
    Mesh,
}

/// One interconnect domain. Level 0 tiers are the innermost (e.g. a node);
/// every tier of level `l + 1` contains whole tiers of level `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkTier {
    pub kind: TierKind,
    #[serde(default)]
    pub level: u32,
    pub members: Vec<u32>,
    /// Per-hop handshake latency in seconds.
    pub alpha: f64,
    /// Effective per-link bandwidth in bytes per second.
    pub bandwidth: f64,
    #[serde(default = "one")]
    pub links_per_node: u32,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub device_id: String,
    /// Peak FLOP/s per precision.
    pub peak_flops: BTreeMap<Precision, f64>,
    /// Bytes per second.
    pub mem_bandwidth: f64,
    /// Bytes.
    pub mem_capacity: f64,
    /// Seconds.
    pub launch_overhead: f64,
    /// Watts.
    pub tdp: f64,
    #[serde(default)]
    pub topology: Vec<LinkTier>,
}

impl HardwareSpec {
    /// A single-device spec with no interconnect.
    pub fn device(id: &str, peak: &[(Precision, f64)], mem_bandwidth: f64) -> Self {
        HardwareSpec {
            device_id: id.into(),
            peak_flops: peak.iter().copied().collect(),
            mem_bandwidth,
            mem_capacity: 80e9,
            launch_overhead: 0.0,
            tdp: 700.0,
            topology: Vec::new(),
        }
    }

    pub fn peak(&self, p: Precision) -> Result<f64> {
        self.peak_flops
            .get(&p)
            .copied()
            .ok_or_else(|| Error::config(format!("hardware `{}` has no peak FLOP/s for {p}", self.device_id)))
    }

    /// Ranks covered by the topology (empty without tiers).
    pub fn ranks(&self) -> BTreeSet<u32> {
        self.topology.iter().filter(|t| t.level == 0).flat_map(|t| t.members.iter().copied()).collect()
    }

    pub fn levels(&self) -> u32 {
        self.topology.iter().map(|t| t.level + 1).max().unwrap_or(0)
    }

    /// Index of the tier of `level` containing `rank`.
    pub fn tier_of(&self, rank: u32, level: u32) -> Option<usize> {
        self.topology.iter().position(|t| t.level == level && t.members.contains(&rank))
    }

    /// Lowest tier containing all of `ranks`.
    pub fn enclosing_tier(&self, ranks: &[u32]) -> Result<usize> {
        let first = *ranks.first().ok_or_else(|| Error::Topology("empty rank group".into()))?;
        for level in 0..self.levels() {
            let Some(t) = self.tier_of(first, level) else {
                return Err(Error::Topology(format!("rank {first} is not in any tier of level {level}")));
            };
            if ranks.iter().all(|r| self.topology[t].members.contains(r)) {
                return Ok(t);
            }
        }
        Err(Error::Topology(format!("no tier spans ranks {ranks:?}")))
    }

    /// Checks rates, that each level partitions the same rank set, and that
    /// tiers nest.
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if self.peak_flops.is_empty() {
            return Err(Error::config("peak_flops is empty"));
        }
        if let Some((p, v)) = self.peak_flops.iter().find(|(_, v)| !pos(**v)) {
            return Err(Error::config(format!("peak FLOP/s for {p} must be positive, got {v}")));
        }
        if !pos(self.mem_bandwidth) || !pos(self.mem_capacity) {
            return Err(Error::config("memory bandwidth and capacity must be positive"));
        }
        if !(self.launch_overhead >= 0.0) || !(self.tdp >= 0.0) {
            return Err(Error::config("launch overhead and TDP must be non-negative"));
        }
        let all = self.ranks();
        for (i, t) in self.topology.iter().enumerate() {
            if !pos(t.bandwidth) || !(t.alpha >= 0.0) || t.links_per_node == 0 || t.members.is_empty() {
                return Err(Error::config(format!("tier {i}: bandwidth and links_per_node must be positive, alpha non-negative, members non-empty")));
            }
        }
        for level in 0..self.levels() {
            let mut seen = BTreeSet::new();
            for t in self.topology.iter().filter(|t| t.level == level) {
                for &m in &t.members {
                    if !seen.insert(m) {
                        return Err(Error::config(format!("rank {m} appears twice at tier level {level}")));
                    }
                }
            }
            if seen.is_empty() {
                return Err(Error::config(format!("tier level {level} has no tiers")));
            }
            if seen != all {
                return Err(Error::config(format!("tier level {level} does not cover the same ranks as level 0")));
            }
            if level > 0 {
                for t in self.topology.iter().filter(|t| t.level == level - 1) {
                    let outer = self.tier_of(t.members[0], level).unwrap();
                    if t.members.iter().any(|m| !self.topology[outer].members.contains(m)) {
                        return Err(Error::config(format!("a level {} tier is split across level {level} tiers", level - 1)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `nodes` groups of `per_node` ranks: a ring (or switch) inside each group
/// and a switch across groups.
pub fn two_tier(per_node: u32, nodes: u32, intra: (TierKind, f64, f64), inter: (f64, f64, u32)) -> Vec<LinkTier> {
    let mut v: Vec<LinkTier> = (0..nodes)
        .map(|n| LinkTier {
            kind: intra.0,
            level: 0,
            members: (n * per_node..(n + 1) * per_node).collect(),
            alpha: intra.1,
            bandwidth: intra.2,
            links_per_node: 1,
        })
        .collect();
    if nodes > 1 {
        v.push(LinkTier {
            kind: TierKind::Switch,
            level: 1,
            members: (0..nodes * per_node).collect(),
            alpha: inter.0,
            bandwidth: inter.1,
            links_per_node: inter.2,
        });
    }
    v
}
