use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{attr, OpKind, OpNode, OperatorGraph, TensorMeta, TensorRef, TensorRole};
use crate::{Error, Result};

pub(crate) fn div(v: u64, by: u64, what: &str) -> Result<u64> {
    if v % by != 0 {
        return Err(Error::config(format!("{what} ({v}) is not divisible by {by}")));
    }
    Ok(v / by)
}

fn split_last(m: &mut TensorMeta, tp: u64, what: &str) -> Result<()> {
    let last = m.shape.last_mut().ok_or_else(|| Error::config(format!("{what}: cannot shard a scalar")))?;
    *last = div(*last, tp, what)?;
    Ok(())
}

fn split_dim(m: &mut TensorMeta, dim: usize, tp: u64, what: &str) -> Result<()> {
    let v = m.shape.get_mut(dim).ok_or_else(|| Error::config(format!("{what}: rank too small to shard dim {dim}")))?;
    *v = div(*v, tp, what)?;
    Ok(())
}

fn scale_replicas(n: &mut OpNode, by: u64) {
    let r = n.replicas() * by;
    n.set_attr(attr::REPLICAS, r);
}

fn comm_node(g: &OperatorGraph, id: &str, kind: OpKind, src: &OpNode, tp: u64, out: TensorMeta) -> OpNode {
    let mut n = OpNode::new(g.fresh_id(id), kind, src.phase)
        .with_inputs([src.out(0)])
        .with_output(out)
        .with_attr(attr::GROUP, "tp")
        .with_attr(attr::GROUP_SIZE, tp);
    if let Some(p) = src.attrs.get(attr::BLOCK_PART) {
        n.attrs.insert(attr::BLOCK_PART.into(), p.clone());
    }
    n
}

/// Tensor (and optionally sequence) parallelism over `tp` ranks.
///
/// Nodes are sharded by their `shard` tag: `col` and `local` split the last
/// output dimension, `attn` also splits the head counts, `row` keeps full
/// (partial-sum) outputs and `rep` is replicated. Untagged nodes are
/// replicated, or split along dimension 1 when `sp` is set. A region-entry
/// node is followed by an identity marker whose gradient is an all-reduce
/// (an all-gather under `sp`); a region-exit node by an all-reduce (a
/// reduce-scatter under `sp`). Returns the graph of a single rank.
pub fn apply_tp(g: &OperatorGraph, tp: u64, sp: bool) -> Result<OperatorGraph> {
    if tp == 0 {
        return Err(Error::config("tp must be positive"));
    }
    if tp == 1 {
        return Ok(g.clone());
    }
    if g.is_joint() {
        return Err(Error::config("apply tensor parallelism before deriving the backward graph"));
    }
    if let Some(n) = g.nodes.iter().find(|n| matches!(n.kind, OpKind::Fused(_))) {
        return Err(Error::config(format!("apply tensor parallelism before fusion (found fused node `{}`)", n.id)));
    }
    g.validate()?;

    // Weight splits implied by their readers.
    let mut weight_split: BTreeMap<&str, &str> = BTreeMap::new();
    for n in &g.nodes {
        let how = match n.attr_str(attr::SHARD) {
            Some("col") => "last",
            Some("row") => "first",
            _ => continue,
        };
        for r in &n.inputs {
            let TensorRef::Input(name) = r else { continue };
            if g.input(name).is_some_and(|i| i.meta.role == TensorRole::Weight) {
                if let Some(prev) = weight_split.insert(name, how) {
                    if prev != how {
                        return Err(Error::config(format!("weight `{name}` is read with conflicting shardings")));
                    }
                }
            }
        }
    }

    let mut out = OperatorGraph { block_multiplier: g.block_multiplier, ..OperatorGraph::new() };
    for i in &g.inputs {
        let mut m = i.meta.clone();
        let what = format!("input `{}`", i.name);
        match (i.meta.role, weight_split.get(i.name.as_str())) {
            (TensorRole::Weight, Some(&"last")) => split_last(&mut m, tp, &what)?,
            (TensorRole::Weight, Some(_)) => split_dim(&mut m, 0, tp, &what)?,
            (TensorRole::KvCache, _) => split_last(&mut m, tp, &what)?,
            (TensorRole::Activation, _) if sp => split_dim(&mut m, 1, tp, &what)?,
            _ => {}
        }
        out.add_input(i.name.clone(), m);
    }

    let mut rename: BTreeMap<TensorRef, TensorRef> = BTreeMap::new();
    for n in &g.nodes {
        let mut m = n.clone();
        for r in &mut m.inputs {
            if let Some(to) = rename.get(r) {
                *r = to.clone();
            }
        }
        let what = format!("node `{}`", n.id);
        match n.attr_str(attr::SHARD) {
            Some("col" | "local") => {
                for o in &mut m.outputs {
                    split_last(o, tp, &what)?;
                }
            }
            Some("attn") => {
                for o in &mut m.outputs {
                    split_last(o, tp, &what)?;
                }
                for key in [attr::HEADS, attr::KV_HEADS] {
                    if let Some(h) = n.attr_u64(key) {
                        m.set_attr(key, div(h, tp, &format!("{what} {key}"))?);
                    }
                }
            }
            Some("row") => {}
            Some("rep") => scale_replicas(&mut m, tp),
            None if sp && !n.kind.is_comm() => {
                for o in &mut m.outputs {
                    split_dim(o, 1, tp, &what)?;
                }
            }
            None => scale_replicas(&mut m, tp),
            Some(other) => return Err(Error::config(format!("{what}: unknown shard tag `{other}`"))),
        }
        let full = m.outputs[0].clone();
        let region_in = m.attr_bool(attr::TP_REGION_IN);
        let region_out = m.attr_bool(attr::TP_REGION_OUT);
        let src = m.clone();
        out.push(m);

        let comm = if region_in && sp {
            let mut o = full.clone();
            o.shape[1] *= tp;
            let mut c = comm_node(&out, &format!("{}.tp_gather", n.id), OpKind::AllGather, &src, tp, o).with_attr(attr::DIM, 1u64);
            scale_replicas(&mut c, tp);
            Some(c)
        } else if region_in {
            let mut c = comm_node(&out, &format!("{}.tp_in", n.id), OpKind::Noop, &src, tp, full.clone())
                .with_attr(attr::BWD_COMM, "all_reduce");
            scale_replicas(&mut c, tp);
            Some(c)
        } else if region_out && sp {
            let mut o = full.clone();
            split_dim(&mut o, 1, tp, &what)?;
            Some(comm_node(&out, &format!("{}.tp_scatter", n.id), OpKind::ReduceScatter, &src, tp, o).with_attr(attr::DIM, 1u64))
        } else if region_out {
            let mut c = comm_node(&out, &format!("{}.tp_reduce", n.id), OpKind::AllReduce, &src, tp, full.clone());
            scale_replicas(&mut c, tp);
            Some(c)
        } else {
            None
        };
        if let Some(c) = comm {
            rename.insert(src.out(0), c.out(0));
            out.push(c);
        }
    }
    for o in &g.outputs {
        let t = rename.get(&o.tensor).cloned().unwrap_or_else(|| o.tensor.clone());
        out.add_output(o.name.clone(), t);
    }
    out.validate()?;
    Ok(out)
}

/// Ids of comm nodes in `g`, for inspection.
pub fn comm_kinds(g: &OperatorGraph) -> Vec<(String, OpKind)> {
    g.nodes.iter().filter(|n| n.kind.is_comm()).map(|n| (n.id.clone(), n.kind.clone())).collect()
}
