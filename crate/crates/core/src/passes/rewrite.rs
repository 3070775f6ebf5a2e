//! Pattern matching and replacement over operator graphs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::{attr, op_flops, AttrValue, EltwiseOp, OpKind, OpNode, OperatorGraph, TensorMeta, TensorRef};
use crate::{Error, Result};

/// Extra predicate on a candidate node.
pub type NodeCheck = fn(&OperatorGraph, &OpNode) -> bool;

/// Constraints on the node bound to one pattern slot.
#[derive(Clone, Debug, Default)]
pub struct SlotPred {
    /// Accepted kinds; empty accepts any kind.
    pub kinds: Vec<OpKind>,
    /// Attributes that must be present with exactly these values.
    pub attrs: Vec<(String, AttrValue)>,
    pub check: Option<NodeCheck>,
}

impl SlotPred {
    pub fn kinds(kinds: impl IntoIterator<Item = OpKind>) -> Self {
        SlotPred { kinds: kinds.into_iter().collect(), ..Default::default() }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.push((key.to_string(), value.into()));
        self
    }

    pub fn with_check(mut self, check: NodeCheck) -> Self {
        self.check = Some(check);
        self
    }

    fn accepts(&self, g: &OperatorGraph, n: &OpNode) -> bool {
        (self.kinds.is_empty() || self.kinds.contains(&n.kind))
            && self.attrs.iter().all(|(k, v)| n.attrs.get(k) == Some(v))
            && self.check.is_none_or(|c| c(g, n))
    }
}

/// `slots[to]` consumes output `output` of `slots[from]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub output: usize,
    pub to: usize,
}

#[derive(Clone, Debug)]
pub struct Pattern {
    pub slots: Vec<SlotPred>,
    pub edges: Vec<Edge>,
    /// Reject matches whose internal tensors are also read outside the match.
    pub exclusive: bool,
}

impl Pattern {
    /// A linear chain where each slot consumes output 0 of the previous one.
    pub fn chain(slots: impl IntoIterator<Item = SlotPred>) -> Self {
        let slots: Vec<SlotPred> = slots.into_iter().collect();
        let edges = (1..slots.len()).map(|i| Edge { from: i - 1, output: 0, to: i }).collect();
        Pattern { slots, edges, exclusive: true }
    }

    /// Checks that every slot after the first is linked to an earlier slot
    /// (so the pattern is connected) and that edges point forward (so it is acyclic).
    pub fn validate(&self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::Rewrite("pattern has no slots".into()));
        }
        for e in &self.edges {
            if e.from >= self.slots.len() || e.to >= self.slots.len() {
                return Err(Error::Rewrite(format!("edge {e:?} names a missing slot")));
            }
            if e.from >= e.to {
                return Err(Error::Rewrite(format!("edge {e:?} must point from an earlier to a later slot")));
            }
        }
        for j in 1..self.slots.len() {
            if !self.edges.iter().any(|e| e.to == j) {
                return Err(Error::Rewrite(format!("slot {j} is not connected to an earlier slot")));
            }
        }
        Ok(())
    }
}

/// A successful binding: `nodes[slot]` is a position in the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Match {
    pub nodes: Vec<usize>,
}

impl Match {
    fn members(&self) -> BTreeSet<usize> {
        self.nodes.iter().copied().collect()
    }

    fn ids<'a>(&self, g: &'a OperatorGraph) -> BTreeSet<&'a str> {
        self.nodes.iter().map(|&i| g.nodes[i].id.as_str()).collect()
    }

    /// Inputs read by matched nodes but produced outside the match, deduplicated in slot order.
    pub fn external_inputs(&self, g: &OperatorGraph) -> Vec<TensorRef> {
        let ids = self.ids(g);
        let mut out: Vec<TensorRef> = Vec::new();
        for &i in &self.nodes {
            for r in &g.nodes[i].inputs {
                let internal = r.node().is_some_and(|n| ids.contains(n));
                if !internal && !out.contains(r) {
                    out.push(r.clone());
                }
            }
        }
        out
    }

    /// Outputs of matched nodes read outside the match or exported as graph outputs.
    pub fn external_outputs(&self, g: &OperatorGraph) -> Vec<TensorRef> {
        let members = self.members();
        let mut external = BTreeSet::new();
        for (i, n) in g.nodes.iter().enumerate() {
            if members.contains(&i) {
                continue;
            }
            for r in &n.inputs {
                external.insert(r.clone());
            }
        }
        for o in &g.outputs {
            external.insert(o.tensor.clone());
        }
        let mut out = Vec::new();
        for &i in &self.nodes {
            let n = &g.nodes[i];
            for k in 0..n.outputs.len() {
                let r = n.out(k);
                if external.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }
}

/// Nodes replacing a match, and where each former external output now lives.
#[derive(Clone, Debug, Default)]
pub struct Replacement {
    pub nodes: Vec<OpNode>,
    pub outputs: Vec<(TensorRef, TensorRef)>,
}

pub type ReplaceFn = Arc<dyn Fn(&OperatorGraph, &Match) -> Result<Replacement> + Send + Sync>;

#[derive(Clone)]
pub enum Action {
    /// Collapse the match into one `fused` node.
    Fuse,
    Replace(ReplaceFn),
}

impl fmt::Debug for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Fuse => f.write_str("Fuse"),
            Action::Replace(_) => f.write_str("Replace(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rewrite {
    pub name: String,
    pub pattern: Pattern,
    pub action: Action,
}

/// Finds disjoint matches, earliest anchor first.
pub fn find_matches(g: &OperatorGraph, p: &Pattern) -> Vec<Match> {
    let consumers = g.consumers();
    let mut used = BTreeSet::new();
    let mut found = Vec::new();
    for anchor in 0..g.nodes.len() {
        if used.contains(&anchor) || !p.slots[0].accepts(g, &g.nodes[anchor]) {
            continue;
        }
        let mut bind = alloc::vec![usize::MAX; p.slots.len()];
        bind[0] = anchor;
        let ctx = Search { g, p, consumers: &consumers, used: &used };
        if ctx.extend(&mut bind, 1) {
            let m = Match { nodes: bind };
            for &i in &m.nodes {
                used.insert(i);
            }
            found.push(m);
        }
    }
    found
}

struct Search<'a> {
    g: &'a OperatorGraph,
    p: &'a Pattern,
    consumers: &'a BTreeMap<TensorRef, Vec<usize>>,
    used: &'a BTreeSet<usize>,
}

impl Search<'_> {
    fn extend(&self, bind: &mut Vec<usize>, j: usize) -> bool {
        if j == self.p.slots.len() {
            return self.admissible(bind);
        }
        for c in self.candidates(bind, j) {
            if self.used.contains(&c) || bind[..j].contains(&c) || !self.p.slots[j].accepts(self.g, &self.g.nodes[c]) {
                continue;
            }
            bind[j] = c;
            if self.edges_hold(bind, j) && self.extend(bind, j + 1) {
                return true;
            }
        }
        bind[j] = usize::MAX;
        false
    }

    fn candidates(&self, bind: &[usize], j: usize) -> Vec<usize> {
        // Validation guarantees an edge into `j` from an earlier slot.
        let e = self.p.edges.iter().find(|e| e.to == j).unwrap();
        let t = self.g.nodes[bind[e.from]].out(e.output);
        self.consumers.get(&t).cloned().unwrap_or_default()
    }

    fn edges_hold(&self, bind: &[usize], j: usize) -> bool {
        self.p.edges.iter().filter(|e| e.from <= j && e.to <= j).all(|e| {
            let t = self.g.nodes[bind[e.from]].out(e.output);
            self.g.nodes[bind[e.to]].inputs.contains(&t)
        })
    }

    fn admissible(&self, bind: &[usize]) -> bool {
        let members: BTreeSet<usize> = bind.iter().copied().collect();
        if self.p.exclusive {
            for e in &self.p.edges {
                let t = self.g.nodes[bind[e.from]].out(e.output);
                let outside = self.consumers.get(&t).is_some_and(|cs| cs.iter().any(|c| !members.contains(c)));
                if outside || self.g.outputs.iter().any(|o| o.tensor == t) {
                    return false;
                }
            }
        }
        // Convexity: no path leaves the match and re-enters it.
        let last = *members.iter().next_back().unwrap();
        let mut frontier: Vec<usize> = Vec::new();
        let mut seen = BTreeSet::new();
        for &m in &members {
            let n = &self.g.nodes[m];
            for k in 0..n.outputs.len() {
                for &c in self.consumers.get(&n.out(k)).map(Vec::as_slice).unwrap_or(&[]) {
                    if !members.contains(&c) && c < last && seen.insert(c) {
                        frontier.push(c);
                    }
                }
            }
        }
        while let Some(x) = frontier.pop() {
            let n = &self.g.nodes[x];
            for k in 0..n.outputs.len() {
                for &c in self.consumers.get(&n.out(k)).map(Vec::as_slice).unwrap_or(&[]) {
                    if members.contains(&c) {
                        return false;
                    }
                    if c < last && seen.insert(c) {
                        frontier.push(c);
                    }
                }
            }
        }
        true
    }
}

/// Flags carried over from any member of a fused region.
const FUSED_FLAGS: &[&str] = &[attr::TP_REGION_IN, attr::TP_REGION_OUT];

/// Builds the single fused node replacing `m`. Its FLOPs are the sum of the
/// constituents'; its byte count follows from external tensors only.
pub fn fuse_match(g: &OperatorGraph, m: &Match) -> Result<Replacement> {
    let index = g.index();
    let anchor = &g.nodes[m.nodes[0]];
    let mut kinds = Vec::new();
    let mut flops = 0u64;
    for &i in &m.nodes {
        let n = &g.nodes[i];
        match &n.kind {
            OpKind::Fused(parts) => kinds.extend(parts.iter().cloned()),
            k => kinds.push(k.clone()),
        }
        flops += op_flops(n, &g.input_metas(&index, i)?);
    }
    let id = g.fresh_id(&format!("{}.fused", anchor.id));
    let mut node = OpNode::new(id.clone(), OpKind::Fused(kinds), anchor.phase).with_inputs(m.external_inputs(g));
    for (k, v) in &anchor.attrs {
        if !matches!(k.as_str(), attr::FLOPS | attr::TRANSPOSE_A | attr::TRANSPOSE_B | attr::REDUCE) {
            node.attrs.insert(k.clone(), v.clone());
        }
    }
    for &i in &m.nodes {
        for flag in FUSED_FLAGS {
            if g.nodes[i].attr_bool(flag) {
                node.set_attr(flag, true);
            }
        }
    }
    node.set_attr(attr::FLOPS, flops);
    let mut outputs = Vec::new();
    let mut external = m.external_outputs(g);
    if external.is_empty() {
        // Dead region: keep the tail's outputs so the node stays well formed.
        let tail = &g.nodes[*m.nodes.last().unwrap()];
        external = (0..tail.outputs.len()).map(|k| tail.out(k)).collect();
    }
    for (k, r) in external.into_iter().enumerate() {
        node.outputs.push(g.resolve_with(&index, &r).cloned().unwrap());
        outputs.push((r, TensorRef::output(id.clone(), k)));
    }
    Ok(Replacement { nodes: alloc::vec![node], outputs })
}

/// Applies `r` until no further match exists. Returns the rewritten graph and
/// the number of matches replaced.
pub fn match_replace(g: &OperatorGraph, r: &Rewrite) -> Result<(OperatorGraph, usize)> {
    r.pattern.validate()?;
    let mut g = g.clone();
    let mut total = 0;
    // Every round removes at least one node or stops, so this bound is never reached by a terminating rewrite.
    let limit = g.nodes.len() + 1;
    for _ in 0..limit {
        let matches = find_matches(&g, &r.pattern);
        if matches.is_empty() {
            return Ok((g, total));
        }
        total += matches.len();
        g = apply_round(&g, &matches, r)?;
    }
    Err(Error::Rewrite(format!("rewrite `{}` did not reach a fixpoint", r.name)))
}

fn apply_round(g: &OperatorGraph, matches: &[Match], r: &Rewrite) -> Result<OperatorGraph> {
    let mut rename: BTreeMap<TensorRef, TensorRef> = BTreeMap::new();
    let mut emit_after: BTreeMap<usize, Vec<OpNode>> = BTreeMap::new();
    let mut removed = BTreeSet::new();
    for m in matches {
        let rep = match &r.action {
            Action::Fuse => fuse_match(g, m)?,
            Action::Replace(f) => f(g, m)?,
        };
        let required = m.external_outputs(g);
        let local: BTreeMap<&str, &OpNode> = rep.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        let meta_of = |t: &TensorRef| -> Option<TensorMeta> {
            match t.node().and_then(|id| local.get(id)) {
                Some(n) => match t {
                    TensorRef::Output { index, .. } => n.outputs.get(*index).cloned(),
                    TensorRef::Input(_) => None,
                },
                None => g.resolve(t).cloned(),
            }
        };
        for old in &required {
            let Some((_, new)) = rep.outputs.iter().find(|(o, _)| o == old) else {
                return Err(Error::Rewrite(format!("`{}` leaves external tensor `{old}` unmapped", r.name)));
            };
            let (Some(a), Some(b)) = (g.resolve(old), meta_of(new)) else {
                return Err(Error::Rewrite(format!("`{}` maps `{old}` to unknown tensor `{new}`", r.name)));
            };
            if a.shape != b.shape {
                return Err(Error::Rewrite(format!(
                    "`{}` changes the shape of `{old}` from {:?} to {:?}",
                    r.name, a.shape, b.shape
                )));
            }
            rename.insert(old.clone(), new.clone());
        }
        removed.extend(m.nodes.iter().copied());
        let last = *m.nodes.iter().max().unwrap();
        emit_after.entry(last).or_default().extend(rep.nodes);
    }
    let mut out = OperatorGraph { nodes: Vec::new(), ..g.clone() };
    for (i, n) in g.nodes.iter().enumerate() {
        if !removed.contains(&i) {
            out.nodes.push(n.clone());
        }
        if let Some(new) = emit_after.remove(&i) {
            out.nodes.extend(new);
        }
    }
    for n in &mut out.nodes {
        for inp in &mut n.inputs {
            if let Some(to) = rename.get(inp) {
                *inp = to.clone();
            }
        }
    }
    for o in &mut out.outputs {
        if let Some(to) = rename.get(&o.tensor) {
            o.tensor = to.clone();
        }
    }
    out.toposort()?;
    out.validate()?;
    Ok(out)
}

fn single_output_eltwise(_: &OperatorGraph, n: &OpNode) -> bool {
    n.outputs.len() == 1 && !n.attr_bool(attr::REDUCE) && !n.attr_bool(attr::MOE_ROUTING)
}

fn is_bias_add(g: &OperatorGraph, n: &OpNode) -> bool {
    let out = n.outputs[0].numel();
    single_output_eltwise(g, n) && n.inputs.len() == 2 && n.inputs.iter().any(|r| g.resolve(r).is_some_and(|m| m.numel() < out))
}

const ELTWISE: [OpKind; 4] = [
    OpKind::Elementwise(EltwiseOp::Add),
    OpKind::Elementwise(EltwiseOp::Mul),
    OpKind::Elementwise(EltwiseOp::Silu),
    OpKind::Elementwise(EltwiseOp::Gelu),
];

/// Matmul followed by a broadcast bias add.
pub fn bias_fusion() -> Rewrite {
    Rewrite {
        name: "bias".into(),
        pattern: Pattern::chain([
            SlotPred::kinds([OpKind::Matmul, OpKind::BatchedMatmul]),
            SlotPred::kinds([OpKind::Elementwise(EltwiseOp::Add)]).with_check(is_bias_add),
        ]),
        action: Action::Fuse,
    }
}

/// Two consecutive elementwise ops.
pub fn eltwise_chain_fusion() -> Rewrite {
    let slot = SlotPred::kinds(ELTWISE).with_check(single_output_eltwise);
    Rewrite { name: "eltwise_chain".into(), pattern: Pattern::chain([slot.clone(), slot]), action: Action::Fuse }
}

/// Matmul followed by an activation.
pub fn matmul_activation_fusion() -> Rewrite {
    Rewrite {
        name: "matmul_act".into(),
        pattern: Pattern::chain([
            SlotPred::kinds([OpKind::Matmul, OpKind::BatchedMatmul]),
            SlotPred::kinds([OpKind::Elementwise(EltwiseOp::Silu), OpKind::Elementwise(EltwiseOp::Gelu)])
                .with_check(single_output_eltwise),
        ]),
        action: Action::Fuse,
    }
}

pub fn builtin_rewrites() -> Vec<Rewrite> {
    alloc::vec![bias_fusion(), eltwise_chain_fusion(), matmul_activation_fusion()]
}

pub fn builtin_rewrite(name: &str) -> Result<Rewrite> {
    builtin_rewrites()
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::config(format!("unknown rewrite `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{op_bytes, Phase, Precision, TensorRole};

    fn act(shape: &[u64]) -> TensorMeta {
        TensorMeta::new(shape.to_vec(), Precision::Fp32, TensorRole::Activation)
    }

    fn add(id: &str, a: TensorRef, b: TensorRef, out: &[u64]) -> OpNode {
        OpNode::new(id, OpKind::Elementwise(EltwiseOp::Add), Phase::Forward).with_inputs([a, b]).with_output(act(out))
    }

    fn two_linear_layers() -> OperatorGraph {
        let mut g = OperatorGraph::new();
        let mut x = g.add_input("x", act(&[4, 8]));
        for l in 0..2 {
            let w = g.add_input(format!("w{l}"), TensorMeta::new([8, 8], Precision::Fp32, TensorRole::Weight));
            let b = g.add_input(format!("b{l}"), TensorMeta::new([8], Precision::Fp32, TensorRole::Weight));
            let mm = OpNode::new(format!("mm{l}"), OpKind::Matmul, Phase::Forward).with_inputs([x, w]).with_output(act(&[4, 8]));
            let y = g.push(mm);
            x = g.push(add(&format!("bias{l}"), y, b, &[4, 8]));
        }
        g.add_output("y", x);
        g
    }

    #[test]
    fn bias_pairs_fuse() {
        let g = two_linear_layers();
        let before = g.flops().unwrap();
        let (f, n) = match_replace(&g, &bias_fusion()).unwrap();
        assert_eq!(n, 2);
        assert_eq!(f.nodes.len(), g.nodes.len() - 2);
        assert_eq!(f.flops().unwrap(), before);
        let index = f.index();
        let ins = f.input_metas(&index, 0).unwrap();
        // x, w0, b0 in and one output: the 4x8 intermediate no longer moves.
        assert_eq!(op_bytes(&f.nodes[0], &ins), (32 + 64 + 8 + 32) * 4);
    }

    #[test]
    fn absent_pattern_is_identity() {
        let g = two_linear_layers();
        let (f, n) = match_replace(&g, &matmul_activation_fusion()).unwrap();
        assert_eq!(n, 0);
        assert_eq!(f, g);
    }

    #[test]
    fn overlapping_chain_matches_earliest_anchor() {
        let mut g = OperatorGraph::new();
        let x = g.add_input("x", act(&[16]));
        let a = g.push(add("a", x.clone(), x.clone(), &[16]));
        let b = g.push(add("b", a, x.clone(), &[16]));
        let c = g.push(add("c", b, x, &[16]));
        g.add_output("y", c);
        let p = Pattern::chain([
            SlotPred::kinds([OpKind::Elementwise(EltwiseOp::Add)]),
            SlotPred::kinds([OpKind::Elementwise(EltwiseOp::Add)]),
        ]);
        let m = find_matches(&g, &p);
        assert_eq!(m, [Match { nodes: alloc::vec![0, 1] }]);
        let rw = Rewrite { name: "pair".into(), pattern: p, action: Action::Fuse };
        let (f, n) = match_replace(&g, &rw).unwrap();
        assert_eq!(n, 1);
        assert!(f.node("c").is_some());
    }

    #[test]
    fn shape_changing_replacement_is_rejected() {
        let g = two_linear_layers();
        let bad: ReplaceFn = Arc::new(|g: &OperatorGraph, m: &Match| {
            let mut rep = fuse_match(g, m)?;
            rep.nodes[0].outputs[0].shape = alloc::vec![2, 16];
            Ok(rep)
        });
        let rw = Rewrite { name: "bad".into(), pattern: bias_fusion().pattern, action: Action::Replace(bad) };
        assert!(matches!(match_replace(&g, &rw), Err(Error::Rewrite(_))));
    }

    #[test]
    fn disconnected_pattern_is_rejected() {
        let p = Pattern { slots: alloc::vec![SlotPred::default(), SlotPred::default()], edges: Vec::new(), exclusive: true };
        assert!(p.validate().is_err());
    }
}
