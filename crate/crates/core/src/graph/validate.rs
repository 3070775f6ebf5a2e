use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::cost::{batched_matmul_dims, matmul_dims};
use super::{attr, OpKind, OperatorGraph, TensorMeta, TensorRef};
use crate::{Error, Result};

pub(super) fn validate(g: &OperatorGraph) -> Result<()> {
    if g.block_multiplier == 0 {
        return Err(Error::invalid("<graph>", "block_multiplier must be positive"));
    }
    let mut names = BTreeSet::new();
    for i in &g.inputs {
        if i.name.contains(':') {
            return Err(Error::invalid(&i.name, "graph input names may not contain ':'"));
        }
        if !names.insert(i.name.as_str()) {
            return Err(Error::invalid(&i.name, "duplicate graph input"));
        }
        check_extents(&i.name, &i.meta)?;
    }

    let mut position: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, n) in g.nodes.iter().enumerate() {
        if position.insert(n.id.as_str(), k).is_some() {
            return Err(Error::invalid(&n.id, "duplicate node id"));
        }
    }

    for (k, n) in g.nodes.iter().enumerate() {
        if n.outputs.is_empty() {
            return Err(Error::invalid(&n.id, "node has no outputs"));
        }
        for o in &n.outputs {
            check_extents(&n.id, o)?;
        }
        for r in &n.inputs {
            match r {
                TensorRef::Input(name) => {
                    if g.input(name).is_none() {
                        return Err(Error::DanglingRef { node: n.id.clone(), reference: r.to_string() });
                    }
                }
                TensorRef::Output { node, index } => match position.get(node.as_str()) {
                    None => return Err(Error::DanglingRef { node: n.id.clone(), reference: r.to_string() }),
                    Some(&p) if p >= k => {
                        let mut probe = g.clone();
                        return Err(match toposort(&mut probe) {
                            Err(e) => e,
                            Ok(()) => Error::GraphOrder(format!("`{}` consumes `{r}` before it is produced", n.id)),
                        });
                    }
                    Some(&p) => {
                        if *index >= g.nodes[p].outputs.len() {
                            return Err(Error::DanglingRef { node: n.id.clone(), reference: r.to_string() });
                        }
                    }
                },
            }
        }
        if n.kind.is_comm() {
            if n.attr_str(attr::GROUP).is_none() {
                return Err(Error::invalid(&n.id, "communication node without `group` attribute"));
            }
            if n.attr_u64(attr::GROUP_SIZE).unwrap_or(0) == 0 {
                return Err(Error::invalid(&n.id, "communication node without positive `group_size`"));
            }
        }
    }

    for (k, n) in g.nodes.iter().enumerate() {
        let ins = g.input_metas(&position, k)?;
        check_shapes(n, &ins)?;
    }

    let mut out_names = BTreeSet::new();
    for o in &g.outputs {
        if !out_names.insert(o.name.as_str()) {
            return Err(Error::invalid(&o.name, "duplicate graph output"));
        }
        if g.resolve_with(&position, &o.tensor).is_none() {
            return Err(Error::DanglingRef { node: format!("output `{}`", o.name), reference: o.tensor.to_string() });
        }
    }
    Ok(())
}

fn check_extents(owner: &str, t: &TensorMeta) -> Result<()> {
    if t.shape.is_empty() || t.shape.contains(&0) {
        return Err(Error::invalid(owner, format!("tensor shape {:?} must have positive extents", t.shape)));
    }
    Ok(())
}

fn mismatch(node: &str, what: &str, want: &[u64], got: &[u64]) -> Error {
    Error::invalid(node, format!("{what}: expected shape {want:?}, found {got:?}"))
}

fn check_shapes(n: &super::OpNode, ins: &[&TensorMeta]) -> Result<()> {
    let bwd = n.attr_bool(attr::BACKWARD);
    let out0 = &n.outputs[0].shape;
    match &n.kind {
        OpKind::Matmul => {
            let [a, b, ..] = ins else { return Err(Error::invalid(&n.id, "matmul needs two inputs")) };
            let (_, want) = matmul_dims(n, a, b)
                .ok_or_else(|| Error::invalid(&n.id, format!("matmul contraction mismatch {:?} x {:?}", a.shape, b.shape)))?;
            if &want != out0 {
                return Err(mismatch(&n.id, "matmul output", &want, out0));
            }
        }
        OpKind::BatchedMatmul => {
            let [a, b, ..] = ins else { return Err(Error::invalid(&n.id, "batched_matmul needs two inputs")) };
            let (_, want) = batched_matmul_dims(n, a, b)
                .ok_or_else(|| Error::invalid(&n.id, format!("batched_matmul mismatch {:?} x {:?}", a.shape, b.shape)))?;
            if &want != out0 {
                return Err(mismatch(&n.id, "batched_matmul output", &want, out0));
            }
        }
        OpKind::Attention if !bwd => {
            let q = ins.first().ok_or_else(|| Error::invalid(&n.id, "attention needs a query input"))?;
            if ins.len() < 3 || ins.len() % 2 == 0 {
                return Err(Error::invalid(&n.id, "attention takes a query and key/value pairs"));
            }
            if &q.shape != out0 {
                return Err(mismatch(&n.id, "attention output", &q.shape, out0));
            }
        }
        OpKind::RmsNorm | OpKind::LayerNorm | OpKind::Softmax if !bwd => {
            let x = ins.first().ok_or_else(|| Error::invalid(&n.id, "normalization needs an input"))?;
            if &x.shape != out0 {
                return Err(mismatch(&n.id, "normalization output", &x.shape, out0));
            }
        }
        OpKind::Elementwise(_)
            if !n.attr_bool(attr::REDUCE) && !n.attr_bool(attr::MOE_ROUTING) && n.outputs.len() == 1 && !bwd =>
        {
            let widest = ins.iter().max_by_key(|t| t.numel()).ok_or_else(|| Error::invalid(&n.id, "elementwise needs inputs"))?;
            if &widest.shape != out0 {
                return Err(mismatch(&n.id, "elementwise output", &widest.shape, out0));
            }
            for t in ins {
                if widest.numel() % t.numel() != 0 {
                    return Err(Error::invalid(&n.id, format!("cannot broadcast {:?} to {:?}", t.shape, widest.shape)));
                }
            }
        }
        OpKind::AllReduce if n.attr_u64(attr::PAYLOAD_BYTES).is_none() => {
            if ins.len() != n.outputs.len() || ins.iter().zip(&n.outputs).any(|(i, o)| i.shape != o.shape) {
                return Err(Error::invalid(&n.id, "all_reduce outputs must mirror inputs"));
            }
        }
        OpKind::AllGather | OpKind::ReduceScatter if n.attr_u64(attr::PAYLOAD_BYTES).is_none() => {
            let p = n.attr_u64(attr::GROUP_SIZE).unwrap_or(1);
            let dim = n.attr_u64(attr::DIM).unwrap_or(0) as usize;
            if ins.len() != n.outputs.len() {
                return Err(Error::invalid(&n.id, "gather/scatter needs one output per input"));
            }
            for (i, o) in ins.iter().zip(&n.outputs) {
                let mut want = i.shape.clone();
                let Some(d) = want.get_mut(dim) else {
                    return Err(Error::invalid(&n.id, format!("dim {dim} out of range for {:?}", i.shape)));
                };
                if n.kind == OpKind::AllGather {
                    *d *= p;
                } else {
                    if *d % p != 0 {
                        return Err(Error::invalid(&n.id, format!("extent {} not divisible by group size {p}", *d)));
                    }
                    *d /= p;
                }
                if want != o.shape {
                    return Err(mismatch(&n.id, "gather/scatter output", &want, &o.shape));
                }
            }
        }
        OpKind::AllToAll if n.attr_u64(attr::PAYLOAD).is_none() => {
            let a: u64 = ins.iter().map(|t| t.numel()).sum();
            let b: u64 = n.outputs.iter().map(|t| t.numel()).sum();
            if a != b {
                return Err(Error::invalid(&n.id, format!("all_to_all moves {a} elements in but {b} out")));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Stable Kahn ordering: among ready nodes the one earliest in the current
/// list goes first.
pub(super) fn toposort(g: &mut OperatorGraph) -> Result<()> {
    let n = g.nodes.len();
    let position: BTreeMap<String, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let mut preds: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        for r in &node.inputs {
            if let TensorRef::Output { node: src, .. } = r {
                let &p = position
                    .get(src)
                    .ok_or_else(|| Error::DanglingRef { node: node.id.clone(), reference: r.to_string() })?;
                preds[i].insert(p);
            }
        }
    }
    let mut succs: Vec<Vec<usize>> = alloc::vec![Vec::new(); n];
    let mut indeg: Vec<usize> = alloc::vec![0; n];
    for (i, ps) in preds.iter().enumerate() {
        indeg[i] = ps.len();
        for &p in ps {
            succs[p].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succs[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() < n {
        // Walk predecessor edges inside the unsorted remainder until a node repeats.
        let placed: BTreeSet<usize> = order.iter().copied().collect();
        let start = (0..n).find(|i| !placed.contains(i)).unwrap();
        let mut path = alloc::vec![start];
        let mut cur = start;
        loop {
            let next = *preds[cur].iter().find(|p| !placed.contains(p)).unwrap();
            if let Some(pos) = path.iter().position(|&x| x == next) {
                let cycle = path[pos..].iter().rev().map(|&i| g.nodes[i].id.clone()).collect();
                return Err(Error::Cycle(cycle));
            }
            path.push(next);
            cur = next;
        }
    }
    let mut slots: Vec<Option<super::OpNode>> = core::mem::take(&mut g.nodes).into_iter().map(Some).collect();
    g.nodes = order.into_iter().map(|i| slots[i].take().unwrap()).collect();
    Ok(())
}
