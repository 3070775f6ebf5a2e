use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::tp::div;
use crate::graph::{attr, OpKind, OpNode, OperatorGraph, TensorRef};
use crate::{Error, Result};

/// Expert parallelism over `ep` ranks, seen from rank 0 of the group.
///
/// The rank keeps experts `0..E/ep`. The dispatch outputs are exchanged by
/// an all-to-all so each local expert receives the tokens of all `ep` ranks
/// (leading dimension scaled by `ep`); a second all-to-all returns expert
/// outputs to the combine. Non-local experts and their weights are dropped.
pub fn apply_ep(g: &OperatorGraph, ep: u64) -> Result<OperatorGraph> {
    if ep == 0 {
        return Err(Error::config("ep must be positive"));
    }
    if ep == 1 {
        return Ok(g.clone());
    }
    if g.is_joint() {
        return Err(Error::config("apply expert parallelism before deriving the backward graph"));
    }
    g.validate()?;
    let dispatch = g
        .nodes
        .iter()
        .find(|n| n.attr_bool(attr::MOE_ROUTING) && n.outputs.len() > 1)
        .ok_or_else(|| Error::config("expert parallelism needs a MoE block"))?;
    let combine = g
        .nodes
        .iter()
        .find(|n| n.attr_bool(attr::MOE_ROUTING) && n.attr_bool(attr::REDUCE))
        .ok_or_else(|| Error::config("MoE block has no combine node"))?;
    let experts = dispatch.outputs.len() as u64;
    let local = div(experts, ep, "num_experts")?;
    let is_local = |n: &OpNode| n.attr_u64(attr::EXPERT).is_none_or(|e| e < local);

    let mut out = OperatorGraph { block_multiplier: g.block_multiplier, ..OperatorGraph::new() };
    let dropped: BTreeSet<&str> = g.nodes.iter().filter(|n| !is_local(n)).map(|n| n.id.as_str()).collect();
    let mut live_inputs: BTreeSet<&str> = BTreeSet::new();
    for n in g.nodes.iter().filter(|n| !dropped.contains(n.id.as_str())) {
        for r in &n.inputs {
            if let TensorRef::Input(name) = r {
                live_inputs.insert(name);
            }
        }
    }
    for i in &g.inputs {
        if live_inputs.contains(i.name.as_str()) || !g.nodes.iter().any(|n| n.inputs.contains(&TensorRef::input(i.name.clone()))) {
            out.inputs.push(i.clone());
        }
    }

    let a2a = |id: &str, inputs: Vec<TensorRef>, outs: Vec<crate::graph::TensorMeta>, payload: u64| {
        let mut n = OpNode::new(id, OpKind::AllToAll, dispatch.phase)
            .with_inputs(inputs)
            .with_attr(attr::GROUP, "ep")
            .with_attr(attr::GROUP_SIZE, ep)
            .with_attr(attr::PAYLOAD, payload)
            .with_attr(attr::SHARD, "rep")
            .with_attr(attr::MOE_ROUTING, true)
            .with_attr(attr::BLOCK_PART, "ffn");
        n.outputs = outs;
        n
    };

    let mut rename: BTreeMap<TensorRef, TensorRef> = BTreeMap::new();
    for n in &g.nodes {
        if dropped.contains(n.id.as_str()) {
            continue;
        }
        let mut m = n.clone();
        for r in &mut m.inputs {
            if let Some(to) = rename.get(r) {
                *r = to.clone();
            }
        }
        if n.id == combine.id {
            // Return expert outputs to their token owners.
            let sent: Vec<TensorRef> =
                core::mem::take(&mut m.inputs).into_iter().filter(|r| r.node().is_none_or(|id| !dropped.contains(id))).collect();
            let outs = dispatch.outputs.clone();
            let payload = outs.iter().map(|o| o.numel()).sum::<u64>() / ep;
            let id = out.fresh_id("moe.combine_a2a");
            let c = a2a(&id, sent, outs, payload);
            m.inputs = (0..experts as usize).map(|k| c.out(k)).collect();
            out.push(c);
            out.push(m);
            continue;
        }
        if n.attr_bool(attr::MOE) {
            for o in &mut m.outputs {
                o.shape[0] *= ep;
            }
            if let Some(t) = n.attr_u64(attr::TOKENS) {
                m.set_attr(attr::TOKENS, t * ep);
            }
        }
        let is_dispatch = n.id == dispatch.id;
        out.push(m);
        if is_dispatch {
            let sent: Vec<TensorRef> = (0..experts as usize).map(|k| n.out(k)).collect();
            let payload = n.outputs.iter().map(|o| o.numel()).sum::<u64>() / ep;
            let outs = (0..local as usize)
                .map(|k| {
                    let mut o = n.outputs[k].clone();
                    o.shape[0] *= ep;
                    o
                })
                .collect();
            let id = out.fresh_id("moe.dispatch_a2a");
            let d = a2a(&id, sent, outs, payload);
            for k in 0..local as usize {
                rename.insert(n.out(k), d.out(k));
            }
            out.push(d);
        }
    }
    for o in &g.outputs {
        let t = rename.get(&o.tensor).cloned().unwrap_or_else(|| o.tensor.clone());
        out.add_output(o.name.clone(), t);
    }
    out.validate()?;
    Ok(out)
}

/// Experts hosted by each of the `ep` ranks.
pub fn expert_placement(experts: u64, ep: u64) -> Result<Vec<Vec<u64>>> {
    let local = div(experts, ep, "num_experts")?;
    Ok((0..ep).map(|r| (r * local..(r + 1) * local).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_moe_block, comm_payload_bytes, ModelConfig, MoeConfig, Phase};

    fn moe(experts: u64, top_k: u64, batch: u64, seq: u64, h: u64) -> ModelConfig {
        let mut c = ModelConfig::dense(h, 4, 2 * h, 1, batch, seq);
        c.moe = Some(MoeConfig { num_experts: experts, top_k, expert_ffn_hidden: 2 * h, load_factor: Vec::new() });
        c
    }

    #[test]
    fn two_experts_per_rank() {
        assert_eq!(expert_placement(8, 4).unwrap()[1], [2, 3]);
        let g = apply_ep(&build_moe_block(&moe(8, 2, 1, 16, 16)).unwrap(), 4).unwrap();
        let experts: BTreeSet<u64> = g.nodes.iter().filter_map(|n| n.attr_u64(attr::EXPERT)).collect();
        assert_eq!(experts.into_iter().collect::<Vec<_>>(), [0, 1]);
        assert!(g.input("w_gate.e5").is_none());
        let a2a = g.nodes.iter().filter(|n| n.kind == OpKind::AllToAll && n.phase == Phase::Forward).count();
        assert_eq!(a2a, 2);
    }

    #[test]
    fn dispatch_payload_per_rank() {
        let g = apply_ep(&build_moe_block(&moe(4, 2, 1, 1024, 64)).unwrap(), 4).unwrap();
        assert_eq!(g.node("moe.dispatch_a2a").unwrap().attr_u64(attr::PAYLOAD), Some(32768));
        let idx = g.index();
        let i = idx["moe.dispatch_a2a"];
        let bytes = comm_payload_bytes(&g.nodes[i], &g.input_metas(&idx, i).unwrap());
        assert_eq!(bytes, 4 * 32768 * 2);
    }

    #[test]
    fn indivisible_experts_rejected() {
        assert!(apply_ep(&build_moe_block(&moe(6, 2, 1, 16, 16)).unwrap(), 4).is_err());
    }

    #[test]
    fn dense_block_rejected() {
        let g = crate::graph::build_dense_block(&ModelConfig::dense(16, 4, 32, 1, 1, 4)).unwrap();
        assert!(matches!(apply_ep(&g, 2), Err(Error::Config(_))));
    }
}
