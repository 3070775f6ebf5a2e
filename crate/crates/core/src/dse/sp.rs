//! Per-request sequence-parallel planning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engines::{collective_time, CollectiveKind, EngineStack};
use crate::graph::{attr, ModelConfig, OpKind, OpNode, Phase, TensorMeta, TensorRole};
use crate::{Error, Result};

/// Chunks held by `rank` when a sequence is cut into `2 * sp` equal chunks
/// and dealt out in a zigzag: rank `r` gets chunks `r` and `2sp - 1 - r`.
pub fn zigzag_chunks(sp: u64, rank: u64) -> [u64; 2] {
    [rank, 2 * sp - 1 - rank]
}

/// Latency model of one request's attention under a sequence split.
pub trait SpCost {
    /// Attention latency of a `seq`-token request split over `sp` ranks,
    /// zigzag or contiguous. Callers ensure divisibility.
    fn latency_ns(&self, seq: u64, sp: u64, zigzag: bool) -> Result<f64>;
}

impl<F: Fn(u64, u64, bool) -> Result<f64>> SpCost for F {
    fn latency_ns(&self, seq: u64, sp: u64, zigzag: bool) -> Result<f64> {
        self(seq, sp, zigzag)
    }
}

/// Causal attention priced by an engine stack: each rank computes its query
/// chunks against every earlier key (after gathering keys and values), and
/// the slowest rank plus the key/value all-gather sets the latency.
pub struct AttentionCost<'a> {
    pub model: &'a ModelConfig,
    pub stack: &'a EngineStack,
}

impl AttentionCost<'_> {
    /// One chunk of `len` queries over `prefix` earlier tokens.
    pub fn chunk_ns(&self, len: u64, prefix: u64) -> Result<f64> {
        let m = self.model;
        let qd = m.num_heads * m.head_dim;
        let kvd = m.num_kv_heads * m.head_dim;
        let t = |s: u64, d: u64, role| TensorMeta::new(vec![1, s, d], m.precision, role);
        let mut ins = vec![t(len, qd, TensorRole::Activation)];
        if prefix > 0 {
            ins.push(t(prefix, kvd, TensorRole::KvCache));
            ins.push(t(prefix, kvd, TensorRole::KvCache));
        }
        ins.push(t(len, kvd, TensorRole::Activation));
        ins.push(t(len, kvd, TensorRole::Activation));
        let n = OpNode::new("attention", OpKind::Attention, Phase::Forward)
            .with_output(t(len, qd, TensorRole::Activation))
            .with_attr(attr::HEADS, m.num_heads)
            .with_attr(attr::KV_HEADS, m.num_kv_heads)
            .with_attr(attr::HEAD_DIM, m.head_dim)
            .with_attr(attr::CAUSAL, true);
        let refs: Vec<&TensorMeta> = ins.iter().collect();
        Ok(self.stack.price_node(&n, &refs, &[])?.ns)
    }

    pub fn gather_ns(&self, seq: u64, sp: u64) -> Result<f64> {
        if sp <= 1 {
            return Ok(0.0);
        }
        let m = self.model;
        let bytes = 2 * seq * m.num_kv_heads * m.head_dim * m.precision.bytes();
        let group: Vec<u32> = (0..sp as u32).collect();
        Ok(collective_time(CollectiveKind::AllGather, self.stack.algo, &group, bytes as f64, &self.stack.hw)?.ns)
    }
}

impl SpCost for AttentionCost<'_> {
    fn latency_ns(&self, seq: u64, sp: u64, zigzag: bool) -> Result<f64> {
        let mut worst: f64 = 0.0;
        if zigzag {
            let len = seq / (2 * sp);
            for r in 0..sp {
                let mut t = 0.0;
                for c in zigzag_chunks(sp, r) {
                    t += self.chunk_ns(len, c * len)?;
                }
                worst = worst.max(t);
            }
        } else {
            let len = seq / sp;
            for r in 0..sp {
                worst = worst.max(self.chunk_ns(len, r * len)?);
            }
        }
        Ok(worst + self.gather_ns(seq, sp)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpChoice {
    pub seq: u64,
    pub sp: u64,
    pub zigzag: bool,
    pub latency_ns: f64,
    pub chunk_len: u64,
    /// Chunk indices held by each rank.
    pub chunks: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpPlan {
    pub requests: Vec<SpChoice>,
    /// Sum of per-request latencies (requests are costed independently).
    pub total_ns: f64,
}

fn option_ok(seq: u64, sp: u64, zigzag: bool) -> bool {
    if zigzag {
        seq % (2 * sp) == 0
    } else {
        seq % sp == 0
    }
}

fn choice(seq: u64, sp: u64, zigzag: bool, latency_ns: f64) -> SpChoice {
    let (chunk_len, chunks) = if zigzag {
        (seq / (2 * sp), (0..sp).map(|r| zigzag_chunks(sp, r).to_vec()).collect())
    } else {
        (seq / sp, (0..sp).map(|r| vec![r]).collect())
    };
    SpChoice { seq, sp, zigzag, latency_ns, chunk_len, chunks }
}

/// Picks, for each request independently, the cheapest (sp, zigzag) option.
/// Options whose split does not divide the sequence are skipped; a request
/// with no usable option is a planning error. Ties go to the smaller sp,
/// zigzag first.
pub fn plan_dynamic_sp(batch: &[u64], allowed: &[u64], cost: &dyn SpCost) -> Result<SpPlan> {
    let mut sizes: Vec<u64> = allowed.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Planning("allowed sp sizes must be positive and non-empty".into()));
    }
    let mut plan = SpPlan::default();
    for &seq in batch {
        let mut best: Option<SpChoice> = None;
        for &sp in &sizes {
            for zigzag in [true, false] {
                if seq == 0 || !option_ok(seq, sp, zigzag) {
                    continue;
                }
                let ns = cost.latency_ns(seq, sp, zigzag)?;
                if best.as_ref().is_none_or(|b| ns < b.latency_ns) {
                    best = Some(choice(seq, sp, zigzag, ns));
                }
            }
        }
        let best = best.ok_or_else(|| Error::Planning(format!("no sp option in {sizes:?} divides a {seq}-token request")))?;
        plan.total_ns += best.latency_ns;
        plan.requests.push(best);
    }
    Ok(plan)
}

/// Every request zigzag-split over the same `sp`.
pub fn uniform_zigzag(batch: &[u64], sp: u64, cost: &dyn SpCost) -> Result<SpPlan> {
    let mut plan = SpPlan::default();
    for &seq in batch {
        if sp == 0 || seq == 0 || !option_ok(seq, sp, true) {
            return Err(Error::Planning(format!("{seq}-token request cannot be zigzag-split over sp = {sp}")));
        }
        let ns = cost.latency_ns(seq, sp, true)?;
        plan.total_ns += ns;
        plan.requests.push(choice(seq, sp, true, ns));
    }
    Ok(plan)
}
