use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{attr, OpKind, OpNode, OperatorGraph, Phase, TensorRef};
use crate::Result;

/// Removes no-ops, duplicated nodes and dead code until nothing changes.
/// Returns the cleaned graph and the number of nodes removed.
///
/// A no-op carrying a `bwd_comm` marker is kept in forward-only graphs,
/// since its gradient still needs that collective.
pub fn canonicalize(g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
    let mut g = g.clone();
    let start = g.nodes.len();
    loop {
        let before = g.nodes.len();
        drop_noops(&mut g);
        drop_clones(&mut g);
        drop_dead(&mut g);
        if g.nodes.len() == before {
            break;
        }
    }
    g.validate()?;
    let removed = start - g.nodes.len();
    Ok((g, removed))
}

fn rename_all(g: &mut OperatorGraph, rename: &BTreeMap<TensorRef, TensorRef>) {
    if rename.is_empty() {
        return;
    }
    for n in &mut g.nodes {
        for r in &mut n.inputs {
            if let Some(to) = rename.get(r) {
                *r = to.clone();
            }
        }
    }
    for o in &mut g.outputs {
        if let Some(to) = rename.get(&o.tensor) {
            o.tensor = to.clone();
        }
    }
}

fn drop_noops(g: &mut OperatorGraph) {
    let keep_markers = !g.is_joint();
    let mut rename: BTreeMap<TensorRef, TensorRef> = BTreeMap::new();
    let mut kept = Vec::with_capacity(g.nodes.len());
    for mut n in core::mem::take(&mut g.nodes) {
        for r in &mut n.inputs {
            if let Some(to) = rename.get(r) {
                *r = to.clone();
            }
        }
        let removable = n.kind == OpKind::Noop
            && n.inputs.len() == n.outputs.len()
            && !(keep_markers && n.attrs.contains_key(attr::BWD_COMM));
        if removable {
            for (k, src) in n.inputs.iter().enumerate() {
                rename.insert(n.out(k), src.clone());
            }
        } else {
            kept.push(n);
        }
    }
    g.nodes = kept;
    rename_all(g, &rename);
}

/// Key under which structurally identical nodes collide.
fn clone_key(n: &OpNode) -> (String, Vec<TensorRef>, Phase) {
    (n.kind.to_string(), n.inputs.clone(), n.phase)
}

fn drop_clones(g: &mut OperatorGraph) {
    let mut seen: BTreeMap<(String, Vec<TensorRef>, Phase), Vec<usize>> = BTreeMap::new();
    let mut rename: BTreeMap<TensorRef, TensorRef> = BTreeMap::new();
    let mut dead = BTreeSet::new();
    for i in 0..g.nodes.len() {
        {
            let n = &mut g.nodes[i];
            for r in &mut n.inputs {
                if let Some(to) = rename.get(r) {
                    *r = to.clone();
                }
            }
        }
        let n = &g.nodes[i];
        if n.inputs.is_empty() {
            continue;
        }
        let key = clone_key(n);
        let twin = seen
            .get(&key)
            .and_then(|cands| cands.iter().copied().find(|&j| g.nodes[j].attrs == n.attrs && g.nodes[j].outputs == n.outputs));
        match twin {
            Some(j) => {
                for k in 0..n.outputs.len() {
                    rename.insert(n.out(k), g.nodes[j].out(k));
                }
                dead.insert(i);
            }
            None => seen.entry(key).or_default().push(i),
        }
    }
    let mut i = 0;
    g.nodes.retain(|_| {
        i += 1;
        !dead.contains(&(i - 1))
    });
    rename_all(g, &rename);
}

fn drop_dead(g: &mut OperatorGraph) {
    let index: BTreeMap<String, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let mut live = alloc::vec![false; g.nodes.len()];
    let mut stack: Vec<usize> = g.outputs.iter().filter_map(|o| o.tensor.node()).filter_map(|id| index.get(id).copied()).collect();
    while let Some(i) = stack.pop() {
        if live[i] {
            continue;
        }
        live[i] = true;
        for r in &g.nodes[i].inputs {
            if let Some(&p) = r.node().and_then(|id| index.get(id)) {
                stack.push(p);
            }
        }
    }
    let mut i = 0;
    g.nodes.retain(|_| {
        i += 1;
        live[i - 1]
    });
}
