use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{attr, saved_activations, OperatorGraph, Phase, TensorRef, TensorRole};
use crate::{Error, Result};

/// Forward producer position of a node-output reference.
fn forward_producer(g: &OperatorGraph, index: &BTreeMap<&str, usize>, t: &TensorRef) -> Option<usize> {
    let &p = index.get(t.node()?)?;
    (g.nodes[p].phase == Phase::Forward).then_some(p)
}

/// Saved activations that can be rebuilt from tensors resident anyway, plus
/// the forward tensors needed to rebuild them. A saved activation is kept as
/// a checkpoint when its rebuild would read a transient tensor after that
/// tensor's last use, so recomputing never extends a lifetime. Graph outputs
/// are never recomputed since they stay resident.
pub fn full_recompute_policy(g: &OperatorGraph) -> Vec<TensorRef> {
    let index = g.index();
    let kept: BTreeSet<&TensorRef> = g.outputs.iter().map(|o| &o.tensor).collect();
    let mut roots: BTreeSet<TensorRef> =
        saved_activations(g).into_iter().filter(|t| !kept.contains(t) && forward_producer(g, &index, t).is_some()).collect();
    loop {
        let policy = closure(g, &index, &roots, &kept);
        if policy.is_empty() {
            return Vec::new();
        }
        let Ok((rc, _)) = recompute(g, &ordered(g, &policy)) else { return Vec::new() };
        let bad = late_reads(g, &rc);
        if bad.is_empty() {
            return ordered(g, &policy);
        }
        roots.retain(|r| !closure(g, &index, &BTreeSet::from([r.clone()]), &kept).iter().any(|t| t.node().is_some_and(|n| bad.contains(n))));
    }
}

/// `roots` plus every forward tensor, other than graph outputs, that their
/// producers read transitively.
fn closure(g: &OperatorGraph, index: &BTreeMap<&str, usize>, roots: &BTreeSet<TensorRef>, kept: &BTreeSet<&TensorRef>) -> BTreeSet<TensorRef> {
    let mut set = roots.clone();
    let mut work: Vec<TensorRef> = set.iter().cloned().collect();
    while let Some(t) = work.pop() {
        let Some(p) = forward_producer(g, index, &t) else { continue };
        for r in &g.nodes[p].inputs {
            if !kept.contains(r) && forward_producer(g, index, r).is_some() && set.insert(r.clone()) {
                work.push(r.clone());
            }
        }
    }
    set
}

/// Ids of the original nodes whose clone in `rc` reads a transient tensor
/// after the last non-clone reader of that tensor.
fn late_reads(g: &OperatorGraph, rc: &OperatorGraph) -> BTreeSet<String> {
    let kept: BTreeSet<&TensorRef> = rc.outputs.iter().map(|o| &o.tensor).collect();
    let clone = |i: usize| rc.nodes[i].attr_bool(attr::RECOMPUTE) && !g.nodes.iter().any(|n| n.id == rc.nodes[i].id);
    let mut last_plain: BTreeMap<&TensorRef, usize> = BTreeMap::new();
    for (i, n) in rc.nodes.iter().enumerate() {
        if !clone(i) {
            for r in &n.inputs {
                last_plain.insert(r, i);
            }
        }
    }
    let position = rc.index();
    let mut bad = BTreeSet::new();
    for (i, n) in rc.nodes.iter().enumerate().filter(|&(i, _)| clone(i)) {
        for r in &n.inputs {
            let resident = match r {
                TensorRef::Input(name) => rc.input(name).is_some_and(|x| matches!(x.meta.role, TensorRole::Weight | TensorRole::KvCache | TensorRole::OptimizerState)),
                TensorRef::Output { node, .. } => clone(position[node.as_str()]),
            };
            let live_until = last_plain.get(r).copied().or_else(|| r.node().map(|p| position[p]));
            if !resident && !kept.contains(r) && live_until.is_none_or(|l| l < i) {
                let original = n.id.rsplit_once(".recompute").map_or(n.id.as_str(), |(a, _)| a);
                bad.insert(original.to_string());
            }
        }
    }
    bad
}

fn ordered(g: &OperatorGraph, set: &BTreeSet<TensorRef>) -> Vec<TensorRef> {
    g.nodes.iter().flat_map(|n| (0..n.outputs.len()).map(|k| n.out(k))).filter(|r| set.contains(r)).collect()
}

/// Replaces the saved-for-backward uses of each policy tensor with a clone of
/// its producer re-executed in the backward phase, placed right before the
/// first backward reader. Policy tensors consumed by another clone are
/// themselves recomputed, so chains of clones are built.
///
/// Returns the graph and the number of clones inserted.
pub fn recompute(g: &OperatorGraph, policy: &[TensorRef]) -> Result<(OperatorGraph, usize)> {
    if policy.is_empty() {
        return Ok((g.clone(), 0));
    }
    if !g.is_joint() {
        return Err(Error::Rewrite("recompute needs a joint forward and backward graph".into()));
    }
    let index = g.index();
    let wanted: BTreeSet<TensorRef> = policy.iter().cloned().collect();
    let saved: BTreeSet<TensorRef> = saved_activations(g).into_iter().collect();

    // A policy tensor qualifies when it is saved or feeds the producer of another qualifying one.
    let mut ok: BTreeSet<TensorRef> = wanted.intersection(&saved).cloned().collect();
    let mut work: Vec<TensorRef> = ok.iter().cloned().collect();
    while let Some(t) = work.pop() {
        let Some(p) = forward_producer(g, &index, &t) else { continue };
        for r in &g.nodes[p].inputs {
            if wanted.contains(r) && ok.insert(r.clone()) {
                work.push(r.clone());
            }
        }
    }
    if let Some(bad) = policy.iter().find(|t| !ok.contains(*t) || forward_producer(g, &index, t).is_none()) {
        return Err(Error::Rewrite(format!("recompute policy tensor `{bad}` is not a saved activation")));
    }

    let mut by_producer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in &wanted {
        let p = forward_producer(g, &index, t).unwrap();
        if let TensorRef::Output { index: k, .. } = t {
            by_producer.entry(p).or_default().push(*k);
        }
    }

    let mut out = g.clone();
    let mut clones = 0;
    for (&p, outs) in by_producer.iter().rev() {
        let fwd = &g.nodes[p];
        let mut c = fwd.clone();
        c.id = out.fresh_id(&format!("{}.recompute", fwd.id));
        c.phase = Phase::Backward;
        c.set_attr(attr::RECOMPUTE, true);
        let mut first = None;
        for (i, n) in out.nodes.iter_mut().enumerate() {
            if n.phase == Phase::Forward {
                continue;
            }
            for r in &mut n.inputs {
                if let TensorRef::Output { node, index: k } = r {
                    if *node == fwd.id && outs.contains(k) {
                        *r = TensorRef::output(c.id.clone(), *k);
                        first = Some(first.map_or(i, |f: usize| f.min(i)));
                    }
                }
            }
        }
        let at = first.ok_or_else(|| Error::Rewrite(format!("no backward reader for outputs of `{}`", fwd.id)))?;
        out.nodes.insert(at, c);
        clones += 1;
    }
    out.validate()?;
    Ok((out, clones))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_dense_block, derive_backward, ModelConfig};

    fn joint() -> OperatorGraph {
        derive_backward(&build_dense_block(&ModelConfig::dense(16, 2, 32, 1, 1, 4)).unwrap()).unwrap()
    }

    #[test]
    fn empty_policy_is_identity() {
        let g = joint();
        assert_eq!(recompute(&g, &[]).unwrap(), (g, 0));
    }

    #[test]
    fn one_matmul_adds_its_flops() {
        let g = joint();
        let t = TensorRef::output("gate_proj", 0);
        let (r, n) = recompute(&g, core::slice::from_ref(&t)).unwrap();
        assert_eq!(n, 1);
        let mm = g.node_flops().unwrap()[g.index()["gate_proj"]];
        assert_eq!(r.flops().unwrap(), g.flops().unwrap() + mm);
    }

    #[test]
    fn unsaved_tensor_rejected() {
        let g = joint();
        assert!(recompute(&g, &[TensorRef::input("x")]).is_err());
        assert!(recompute(&g, &[TensorRef::output("ffn_residual", 0)]).is_err());
    }

    #[test]
    fn full_policy_is_valid() {
        let g = joint();
        let policy = full_recompute_policy(&g);
        let (r, n) = recompute(&g, &policy).unwrap();
        assert!(n > 0);
        assert!(r.flops().unwrap() > g.flops().unwrap());
    }
}
