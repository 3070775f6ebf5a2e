use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::DpMode;
use super::tp::div;
use crate::graph::{attr, gradient_outputs, OpKind, OpNode, OperatorGraph, Phase, Precision, TensorMeta, TensorRef, TensorRole};
use crate::{Error, Result};

/// Divisors applied by the memory analyzer to persistent components of the
/// graph returned by [`apply_dp`]. They are relative to that graph's own
/// tensors: parameters sharded in-graph (zero3, fsdp) are already small.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTags {
    pub weight_shard: u64,
    pub grad_shard: u64,
    pub optim_shard: u64,
}

impl Default for MemoryTags {
    fn default() -> Self {
        MemoryTags { weight_shard: 1, grad_shard: 1, optim_shard: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpResult {
    pub graph: OperatorGraph,
    pub tags: MemoryTags,
    pub warnings: Vec<String>,
}

fn token() -> TensorMeta {
    TensorMeta::new([1u64], Precision::Int8, TensorRole::Buffer)
}

fn dp_comm(id: String, kind: OpKind, phase: Phase, dp: u64, role: &str) -> OpNode {
    OpNode::new(id, kind, phase)
        .with_attr(attr::GROUP, "dp")
        .with_attr(attr::GROUP_SIZE, dp)
        .with_attr(attr::DP_ROLE, role)
        .with_attr(attr::BLOCK_PART, "other")
}

/// Weight gradients in the order backward produces them.
fn weight_grads(g: &OperatorGraph) -> Vec<(String, TensorRef, usize)> {
    let index = g.index();
    let mut grads: Vec<(String, TensorRef, usize)> = gradient_outputs(g)
        .into_iter()
        .filter(|(name, _)| g.input(name).is_some_and(|i| i.meta.role == TensorRole::Weight))
        .filter_map(|(name, r)| {
            let pos = *index.get(r.node()?)?;
            Some((name, r, pos))
        })
        .collect();
    grads.sort_by_key(|(_, r, pos)| (*pos, r.clone()));
    grads
}

/// Splits the concatenation of `sizes` into byte buckets of at most `cap`.
/// Returns, per bucket, its size and the indices of the tensors it touches.
pub fn byte_buckets(sizes: &[u64], cap: u64) -> Vec<(u64, Vec<usize>)> {
    let total: u64 = sizes.iter().sum();
    if total == 0 || cap == 0 {
        return Vec::new();
    }
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        offsets.push(off);
        off += s;
    }
    (0..total.div_ceil(cap))
        .map(|k| {
            let lo = k * cap;
            let hi = (lo + cap).min(total);
            let members = (0..sizes.len()).filter(|&i| sizes[i] > 0 && offsets[i] < hi && offsets[i] + sizes[i] > lo).collect();
            (hi - lo, members)
        })
        .collect()
}

/// Inserts each `(anchor, node)` right after position `anchor`, preserving order.
fn insert_after(g: &mut OperatorGraph, mut extra: Vec<(usize, OpNode)>) {
    extra.sort_by_key(|(a, _)| *a);
    let mut it = extra.into_iter().peekable();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in core::mem::take(&mut g.nodes).into_iter().enumerate() {
        nodes.push(n);
        while let Some((_, x)) = it.next_if(|(a, _)| *a == i) {
            nodes.push(x);
        }
    }
    nodes.extend(it.map(|(_, x)| x));
    g.nodes = nodes;
}

/// Data parallelism over `dp` replicas of a joint graph.
///
/// `ddp` all-reduces gradients in byte buckets of `bucket_bytes`, filled in
/// the order backward produces them; `zero1`/`zero2` reduce-scatter the same
/// buckets and all-gather updated parameters in the optimizer phase;
/// `zero3`/`fsdp` shard parameters along dimension 0, gather them before the
/// forward and the backward pass and reduce-scatter the gradients. Bucket
/// collectives run once per step (`step_once`); parameter gathers and
/// gradient reduce-scatters of sharded modes run every microbatch.
pub fn apply_dp(g: &OperatorGraph, dp: u64, mode: DpMode, bucket_bytes: u64) -> Result<DpResult> {
    let mut warnings = Vec::new();
    if dp == 0 {
        return Err(Error::config("dp must be positive"));
    }
    if dp == 1 {
        if mode != DpMode::Ddp {
            warnings.push(format!("dp = 1: {mode} has no effect"));
        }
        return Ok(DpResult { graph: g.clone(), tags: MemoryTags::default(), warnings });
    }
    if !g.is_joint() {
        return Err(Error::config("data parallelism needs a joint forward and backward graph"));
    }
    if bucket_bytes == 0 {
        return Err(Error::config("bucket_bytes must be positive"));
    }
    g.validate()?;
    let grads = weight_grads(g);
    if grads.is_empty() {
        warnings.push("graph has no weight gradients; nothing to synchronize".into());
    }
    let mut out = g.clone();
    let tags = match mode {
        DpMode::Ddp | DpMode::Zero1 | DpMode::Zero2 => {
            let sizes: Vec<u64> = grads.iter().map(|(_, r, _)| g.resolve(r).map_or(0, TensorMeta::bytes)).collect();
            let mut extra = Vec::new();
            let mut gathers = Vec::new();
            for (k, (bytes, members)) in byte_buckets(&sizes, bucket_bytes).into_iter().enumerate() {
                let anchor = members.iter().map(|&i| grads[i].2).max().unwrap();
                let (kind, role) = if mode == DpMode::Ddp {
                    (OpKind::AllReduce, "grad_sync")
                } else {
                    (OpKind::ReduceScatter, "grad_reduce_scatter")
                };
                let n = dp_comm(out.fresh_id(&format!("dp.bucket.{k}")), kind, Phase::Backward, dp, role)
                    .with_inputs(members.iter().map(|&i| grads[i].1.clone()))
                    .with_output(token())
                    .with_attr(attr::PAYLOAD_BYTES, bytes)
                    .with_attr(attr::STEP_ONCE, true);
                out.add_output(n.id.clone(), n.out(0));
                if mode != DpMode::Ddp {
                    let ag = dp_comm(out.fresh_id(&format!("dp.param_gather.{k}")), OpKind::AllGather, Phase::Optimizer, dp, "param_all_gather")
                        .with_inputs([n.out(0)])
                        .with_output(token())
                        .with_attr(attr::PAYLOAD_BYTES, bytes)
                        .with_attr(attr::STEP_ONCE, true);
                    gathers.push(ag);
                }
                extra.push((anchor, n));
            }
            insert_after(&mut out, extra);
            for ag in gathers {
                out.add_output(ag.id.clone(), ag.out(0));
                out.nodes.push(ag);
            }
            match mode {
                DpMode::Ddp => MemoryTags::default(),
                DpMode::Zero1 => MemoryTags { optim_shard: dp, ..MemoryTags::default() },
                _ => MemoryTags { grad_shard: dp, optim_shard: dp, ..MemoryTags::default() },
            }
        }
        DpMode::Zero3 | DpMode::Fsdp => {
            shard_params(&mut out, g, &grads, dp)?;
            MemoryTags::default()
        }
    };
    out.validate()?;
    Ok(DpResult { graph: out, tags, warnings })
}

fn shard_params(out: &mut OperatorGraph, g: &OperatorGraph, grads: &[(String, TensorRef, usize)], dp: u64) -> Result<()> {
    let weights: Vec<String> = g.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.name.clone()).collect();
    if weights.is_empty() {
        return Ok(());
    }
    let mut full: BTreeMap<String, TensorMeta> = BTreeMap::new();
    for i in &mut out.inputs {
        if i.meta.role != TensorRole::Weight {
            continue;
        }
        full.insert(i.name.clone(), i.meta.clone());
        let d0 = i.meta.shape.first_mut().ok_or_else(|| Error::config(format!("cannot shard scalar weight `{}`", i.name)))?;
        *d0 = div(*d0, dp, &format!("dim 0 of weight `{}`", i.name))?;
    }

    let gather = |id: String, phase: Phase| {
        let mut n = dp_comm(id, OpKind::AllGather, phase, dp, "param_prefetch")
            .with_inputs(weights.iter().map(|w| TensorRef::input(w.clone())))
            .with_attr(attr::DIM, 0u64);
        n.outputs = weights.iter().map(|w| full[w].clone()).collect();
        n
    };
    let fwd = gather(out.fresh_id("dp.fwd_gather"), Phase::Forward);
    let bwd = gather(out.fresh_id("dp.bwd_gather"), Phase::Backward);
    for n in &mut out.nodes {
        let src = if n.phase == Phase::Forward { &fwd } else { &bwd };
        for r in &mut n.inputs {
            if let TensorRef::Input(name) = r {
                if let Some(k) = weights.iter().position(|w| w == name) {
                    *r = src.out(k);
                }
            }
        }
    }
    let first_bwd = out.nodes.iter().position(|n| n.phase != Phase::Forward).unwrap_or(out.nodes.len());
    out.nodes.insert(first_bwd, bwd);
    out.nodes.insert(0, fwd);

    if !grads.is_empty() {
        let index = out.index();
        let anchor = grads.iter().filter_map(|(_, r, _)| index.get(r.node()?).copied()).max().unwrap();
        let mut rs = dp_comm(out.fresh_id("dp.grad_scatter"), OpKind::ReduceScatter, Phase::Backward, dp, "grad_reduce_scatter")
            .with_inputs(grads.iter().map(|(_, r, _)| r.clone()))
            .with_attr(attr::DIM, 0u64);
        for (name, _, _) in grads {
            let shard = out.input(name).unwrap().meta.with_role(TensorRole::Gradient);
            rs.outputs.push(shard);
        }
        for (k, (name, _, _)) in grads.iter().enumerate() {
            let grad_name = format!("grad.{name}");
            if let Some(o) = out.outputs.iter_mut().find(|o| o.name == grad_name) {
                o.tensor = rs.out(k);
            }
        }
        insert_after(out, alloc::vec![(anchor, rs)]);
    }
    Ok(())
}
