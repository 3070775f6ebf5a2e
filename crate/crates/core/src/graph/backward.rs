//! Backward-graph derivation from per-operator gradient rules.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{attr, EltwiseOp, OpKind, OpNode, OperatorGraph, Phase, TensorMeta, TensorRef, TensorRole, CAUSAL_FULL_ATTR};
use crate::{Error, Result};

/// Attributes a backward node inherits from its forward counterpart.
const INHERITED: &[&str] = &[
    attr::SHARD,
    attr::REPLICAS,
    attr::BLOCK_PART,
    attr::EXPERT,
    attr::MOE,
    attr::MOE_ROUTING,
    attr::TOKENS,
    attr::GROUP,
    attr::GROUP_SIZE,
    attr::DIM,
    attr::PAYLOAD,
    attr::HEADS,
    attr::KV_HEADS,
    attr::HEAD_DIM,
    attr::CAUSAL,
    attr::TOP_K,
    CAUSAL_FULL_ATTR,
];

/// Appends backward nodes to a forward-only graph.
///
/// Every graph output `o` gains a seed input `grad.o`; every weight or
/// activation input that influences an output gains a graph output
/// `grad.<input>`. Weight gradients carry the `gradient` role.
pub fn derive_backward(g: &OperatorGraph) -> Result<OperatorGraph> {
    if g.nodes.iter().any(|n| n.phase != Phase::Forward) {
        return Err(Error::Rewrite("derive_backward expects a forward-only graph".into()));
    }
    g.validate()?;
    let mut d = Deriver { g: g.clone(), requires: BTreeSet::new(), grads: BTreeMap::new() };
    d.mark_requires();

    for o in &g.outputs {
        if !d.requires.contains(&o.tensor) {
            continue;
        }
        let meta = d.meta(&o.tensor).with_role(TensorRole::Activation);
        let seed = d.g.add_input(format!("grad.{}", o.name), meta);
        d.grads.entry(o.tensor.clone()).or_default().push(seed);
    }

    for n in g.nodes.iter().rev() {
        d.node(n)?;
    }

    for input in &g.inputs {
        let r = TensorRef::input(input.name.clone());
        if !matches!(input.meta.role, TensorRole::Weight | TensorRole::Activation) {
            continue;
        }
        if let Some(grad) = d.take(&r)? {
            d.g.add_output(format!("grad.{}", input.name), grad);
        }
    }
    d.g.validate()?;
    Ok(d.g)
}

/// Forward-produced tensors read by backward nodes, in producer order.
pub fn saved_activations(g: &OperatorGraph) -> Vec<TensorRef> {
    let mut saved = BTreeSet::new();
    for n in g.nodes.iter().filter(|n| n.phase != Phase::Forward) {
        for r in &n.inputs {
            if let Some(p) = r.node().and_then(|id| g.node(id)) {
                if p.phase == Phase::Forward {
                    saved.insert(r.clone());
                }
            }
        }
    }
    let mut out = Vec::new();
    for n in &g.nodes {
        for i in 0..n.outputs.len() {
            let r = n.out(i);
            if saved.contains(&r) {
                out.push(r);
            }
        }
    }
    out
}

struct Deriver {
    g: OperatorGraph,
    requires: BTreeSet<TensorRef>,
    grads: BTreeMap<TensorRef, Vec<TensorRef>>,
}

impl Deriver {
    fn mark_requires(&mut self) {
        for i in &self.g.inputs {
            if matches!(i.meta.role, TensorRole::Weight | TensorRole::Activation) {
                self.requires.insert(TensorRef::input(i.name.clone()));
            }
        }
        for n in &self.g.nodes {
            if n.inputs.iter().any(|r| self.requires.contains(r)) {
                for i in 0..n.outputs.len() {
                    self.requires.insert(n.out(i));
                }
            }
        }
    }

    fn meta(&self, r: &TensorRef) -> TensorMeta {
        self.g.resolve(r).cloned().expect("validated reference")
    }

    fn is_weight(&self, r: &TensorRef) -> bool {
        matches!(r, TensorRef::Input(name) if self.g.input(name).is_some_and(|i| i.meta.role == TensorRole::Weight))
    }

    /// Metadata of the gradient of `target`.
    fn grad_meta(&self, target: &TensorRef) -> TensorMeta {
        let role = if self.is_weight(target) { TensorRole::Gradient } else { TensorRole::Activation };
        self.meta(target).with_role(role)
    }

    /// Sums the accumulated contributions for `t` and returns the total.
    fn take(&mut self, t: &TensorRef) -> Result<Option<TensorRef>> {
        let Some(parts) = self.grads.remove(t) else { return Ok(None) };
        let mut it = parts.into_iter();
        let mut acc = it.next().unwrap();
        let meta = self.grad_meta(t);
        let replicas = self.replicas_of(t);
        for part in it {
            let id = self.g.fresh_id(&format!("grad_acc.{}", t.to_string().replace(':', ".")));
            let n = OpNode::new(id, OpKind::Elementwise(EltwiseOp::Add), Phase::Backward)
                .with_inputs([acc, part])
                .with_output(meta.clone())
                .with_attr(attr::BACKWARD, true);
            let n = if replicas > 1 { n.with_attr(attr::REPLICAS, replicas) } else { n };
            acc = self.g.push(n);
        }
        Ok(Some(acc))
    }

    /// Replication of the forward tensor `t`: that of its producer, or for a
    /// graph input the widest replication among its forward readers.
    fn replicas_of(&self, t: &TensorRef) -> u64 {
        match t.node() {
            Some(id) => self.g.node(id).map_or(1, OpNode::replicas),
            None => self
                .g
                .nodes
                .iter()
                .filter(|n| n.phase == Phase::Forward && n.inputs.contains(t))
                .map(OpNode::replicas)
                .max()
                .unwrap_or(1),
        }
    }

    fn contribute(&mut self, target: &TensorRef, grad: TensorRef) {
        if self.requires.contains(target) {
            self.grads.entry(target.clone()).or_default().push(grad);
        }
    }

    fn derived(&self, fwd: &OpNode, suffix: &str, kind: OpKind) -> OpNode {
        let mut n = OpNode::new(self.g.fresh_id(&format!("{}.{suffix}", fwd.id)), kind, Phase::Backward)
            .with_attr(attr::GRAD_OF, fwd.id.as_str());
        for key in INHERITED {
            if let Some(v) = fwd.attrs.get(*key) {
                n.attrs.insert((*key).to_string(), v.clone());
            }
        }
        n
    }

    /// Pushes `n` with one output per target and records each as that
    /// target's gradient contribution.
    fn emit(&mut self, mut n: OpNode, targets: &[TensorRef]) {
        n.outputs = targets.iter().map(|t| self.grad_meta(t)).collect();
        let id = n.id.clone();
        self.g.nodes.push(n);
        for (i, t) in targets.iter().enumerate() {
            self.contribute(t, TensorRef::output(id.clone(), i));
        }
    }

    /// Gradient `dy` (shaped like the node output) reduced down to `target`'s shape.
    fn reduce_to(&mut self, fwd: &OpNode, dy: TensorRef, target: &TensorRef) {
        if self.meta(&dy).shape == self.meta(target).shape {
            self.contribute(target, dy);
            return;
        }
        let n = self
            .derived(fwd, "dbias", OpKind::Elementwise(EltwiseOp::Add))
            .with_inputs([dy])
            .with_attr(attr::REDUCE, true)
            .with_attr(attr::BACKWARD, true);
        self.emit(n, core::slice::from_ref(target));
    }

    fn unsupported(n: &OpNode) -> Error {
        Error::UnsupportedOp { node: n.id.clone(), kind: n.kind.to_string() }
    }

    fn node(&mut self, n: &OpNode) -> Result<()> {
        let mut dys = Vec::with_capacity(n.outputs.len());
        for i in 0..n.outputs.len() {
            dys.push(self.take(&n.out(i))?);
        }
        if dys.iter().all(Option::is_none) {
            return Ok(());
        }
        let wanted: Vec<TensorRef> = n.inputs.iter().filter(|r| self.requires.contains(*r)).cloned().collect();
        if wanted.is_empty() {
            return Ok(());
        }
        let complete = dys.iter().all(Option::is_some);
        let dy0 = dys[0].clone();

        match &n.kind {
            OpKind::Fused(_) | OpKind::Send | OpKind::Recv => return Err(Self::unsupported(n)),
            OpKind::Matmul | OpKind::BatchedMatmul => {
                if n.attr_bool(attr::TRANSPOSE_A) || n.attr_bool(attr::TRANSPOSE_B) || n.inputs.len() != 2 {
                    return Err(Self::unsupported(n));
                }
                if n.kind == OpKind::Matmul && self.meta(&n.inputs[1]).shape.len() != 2 {
                    return Err(Self::unsupported(n));
                }
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                let (a, b) = (n.inputs[0].clone(), n.inputs[1].clone());
                if self.requires.contains(&a) {
                    let m = self
                        .derived(n, "dA", n.kind.clone())
                        .with_inputs([dy.clone(), b.clone()])
                        .with_attr(attr::TRANSPOSE_B, true);
                    self.emit(m, core::slice::from_ref(&a));
                }
                if self.requires.contains(&b) {
                    let m = self.derived(n, "dW", n.kind.clone()).with_inputs([a, dy]).with_attr(attr::TRANSPOSE_A, true);
                    self.emit(m, core::slice::from_ref(&b));
                }
            }
            OpKind::Attention
            | OpKind::Softmax
            | OpKind::RmsNorm
            | OpKind::LayerNorm
            | OpKind::Elementwise(EltwiseOp::Silu | EltwiseOp::Gelu)
            | OpKind::RouterTopk => {
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                let mut inputs = n.inputs.clone();
                inputs.push(dy);
                let m = self.derived(n, "bwd", n.kind.clone()).with_inputs(inputs).with_attr(attr::BACKWARD, true);
                self.emit(m, &wanted);
            }
            OpKind::Elementwise(EltwiseOp::Add) if n.attr_bool(attr::REDUCE) => {
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                let m = self
                    .derived(n, "bwd", OpKind::Elementwise(EltwiseOp::Mul))
                    .with_inputs([dy])
                    .with_attr(attr::BACKWARD, true);
                self.emit(m, &wanted);
            }
            OpKind::Elementwise(EltwiseOp::Add) => {
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                for t in &wanted {
                    self.reduce_to(n, dy.clone(), t);
                }
            }
            OpKind::Elementwise(EltwiseOp::Mul) if n.outputs.len() > 1 => {
                if !complete {
                    return Err(Error::Rewrite(format!("`{}` has gradients for only some outputs", n.id)));
                }
                let m = self
                    .derived(n, "bwd", OpKind::Elementwise(EltwiseOp::Add))
                    .with_inputs(dys.into_iter().flatten())
                    .with_attr(attr::REDUCE, true)
                    .with_attr(attr::BACKWARD, true);
                self.emit(m, &wanted);
            }
            OpKind::Elementwise(EltwiseOp::Mul) => {
                if n.inputs.len() != 2 {
                    return Err(Self::unsupported(n));
                }
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                for (i, t) in n.inputs.iter().enumerate() {
                    if !self.requires.contains(t) {
                        continue;
                    }
                    let other = n.inputs[1 - i].clone();
                    let out = self.meta(&dy).with_role(TensorRole::Activation);
                    let m = self
                        .derived(n, &format!("d{i}"), OpKind::Elementwise(EltwiseOp::Mul))
                        .with_inputs([dy.clone(), other])
                        .with_attr(attr::BACKWARD, true)
                        .with_output(out);
                    let r = self.g.push(m);
                    self.reduce_to(n, r, t);
                }
            }
            OpKind::EmbeddingLookup => {
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                let Some(table) = n.inputs.get(1).filter(|t| self.requires.contains(*t)).cloned() else {
                    return Ok(());
                };
                let m = self
                    .derived(n, "bwd", OpKind::EmbeddingLookup)
                    .with_inputs([n.inputs[0].clone(), dy])
                    .with_attr(attr::BACKWARD, true);
                self.emit(m, &[table]);
            }
            OpKind::AllReduce => {
                for (i, t) in n.inputs.iter().enumerate() {
                    if let Some(Some(dy)) = dys.get(i) {
                        let dy = dy.clone();
                        self.contribute(t, dy);
                    }
                }
            }
            OpKind::AllGather | OpKind::ReduceScatter | OpKind::AllToAll => {
                if !complete {
                    return Err(Error::Rewrite(format!("`{}` has gradients for only some outputs", n.id)));
                }
                let kind = match n.kind {
                    OpKind::AllGather => OpKind::ReduceScatter,
                    OpKind::ReduceScatter => OpKind::AllGather,
                    _ => OpKind::AllToAll,
                };
                let mut m = self.derived(n, "bwd", kind).with_inputs(dys.into_iter().flatten());
                if let Some(b) = n.attr_u64(attr::PAYLOAD_BYTES) {
                    m.set_attr(attr::PAYLOAD_BYTES, b);
                }
                // Collectives must move every input slot, needed or not.
                let all = n.inputs.clone();
                m.outputs = all.iter().map(|t| self.grad_meta(t)).collect();
                let id = m.id.clone();
                self.g.nodes.push(m);
                for (i, t) in all.iter().enumerate() {
                    self.contribute(t, TensorRef::output(id.clone(), i));
                }
            }
            OpKind::Noop => {
                let dy = dy0.ok_or_else(|| Self::unsupported(n))?;
                let target = n.inputs[0].clone();
                match n.attr_str(attr::BWD_COMM) {
                    None => self.contribute(&target, dy),
                    Some(kind) => {
                        let kind: OpKind = kind.parse()?;
                        if !kind.is_collective() {
                            return Err(Self::unsupported(n));
                        }
                        let m = self.derived(n, "bwd", kind).with_inputs([dy]);
                        self.emit(m, &[target]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// All gradient outputs of a joint graph, keyed by the input they belong to.
pub fn gradient_outputs(g: &OperatorGraph) -> BTreeMap<String, TensorRef> {
    g.outputs
        .iter()
        .filter_map(|o| o.name.strip_prefix("grad.").map(|n| (n.to_string(), o.tensor.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_dense_block, ModelConfig, Precision};

    fn single_matmul() -> OperatorGraph {
        let mut g = OperatorGraph::new();
        let x = g.add_input("x", TensorMeta::new([2, 4, 8], Precision::Fp32, TensorRole::Activation));
        let w = g.add_input("w", TensorMeta::new([8, 16], Precision::Fp32, TensorRole::Weight));
        let y = g.push(
            OpNode::new("mm", OpKind::Matmul, Phase::Forward)
                .with_inputs([x, w])
                .with_output(TensorMeta::new([2, 4, 16], Precision::Fp32, TensorRole::Activation)),
        );
        g.add_output("y", y);
        g
    }

    #[test]
    fn matmul_backward_has_two_matmuls() {
        let j = derive_backward(&single_matmul()).unwrap();
        let bwd: Vec<_> = j.nodes.iter().filter(|n| n.phase == Phase::Backward).collect();
        assert_eq!(bwd.len(), 2);
        assert!(bwd.iter().all(|n| n.kind == OpKind::Matmul));
        let gw = j.resolve(&gradient_outputs(&j)["w"]).unwrap();
        assert_eq!(gw.shape, [8, 16]);
        assert_eq!(gw.role, TensorRole::Gradient);
        assert_eq!(j.phase_flops(Phase::Backward).unwrap(), 2 * j.phase_flops(Phase::Forward).unwrap());
    }

    #[test]
    fn add_backward_is_pass_through() {
        let mut g = OperatorGraph::new();
        let m = TensorMeta::new([4, 4], Precision::Fp32, TensorRole::Activation);
        let a = g.add_input("a", m.clone());
        let b = g.add_input("b", m.clone());
        let y = g.push(
            OpNode::new("add", OpKind::Elementwise(EltwiseOp::Add), Phase::Forward).with_inputs([a, b]).with_output(m),
        );
        g.add_output("y", y);
        let j = derive_backward(&g).unwrap();
        assert_eq!(j.nodes.len(), 1);
        assert_eq!(j.phase_flops(Phase::Backward).unwrap(), 0);
        assert_eq!(j.outputs.len(), 3);
    }

    #[test]
    fn joint_graph_is_rejected() {
        let j = derive_backward(&single_matmul()).unwrap();
        assert!(derive_backward(&j).is_err());
    }

    #[test]
    fn fused_kind_has_no_rule() {
        let mut g = single_matmul();
        g.nodes[0].kind = OpKind::Fused(alloc::vec![OpKind::Matmul]);
        g.nodes[0].set_attr(attr::FLOPS, 10u64);
        let err = derive_backward(&g).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp { ref node, .. } if node == "mm"));
    }

    #[test]
    fn dense_block_weights_each_get_one_gradient() {
        let cfg = ModelConfig::dense(16, 2, 32, 1, 1, 4);
        let g = build_dense_block(&cfg).unwrap();
        let j = derive_backward(&g).unwrap();
        let grads = gradient_outputs(&j);
        for w in g.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight) {
            let gm = j.resolve(&grads[&w.name]).unwrap();
            assert_eq!(gm.shape, w.meta.shape);
        }
        assert!(!saved_activations(&j).is_empty());
    }
}
