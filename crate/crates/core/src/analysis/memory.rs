//! Liveness-based memory accounting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{OperatorGraph, Phase, TensorMeta, TensorRef, TensorRole};
use crate::parallel::MemoryTags;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Weights,
    Gradients,
    OptimizerStates,
    Activations,
    Temporaries,
    CommBuffers,
    KvCache,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Weights,
        Component::Gradients,
        Component::OptimizerStates,
        Component::Activations,
        Component::Temporaries,
        Component::CommBuffers,
        Component::KvCache,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Weights => "weights",
            Component::Gradients => "gradients",
            Component::OptimizerStates => "optimizer_states",
            Component::Activations => "activations",
            Component::Temporaries => "temporaries",
            Component::CommBuffers => "comm_buffers",
            Component::KvCache => "kv_cache",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryOptions {
    /// Optimizer-state bytes per parameter (Adam: two FP32 moments).
    pub optimizer_bytes_per_param: f64,
    /// Reserved-over-allocated factor for allocator fragmentation.
    pub fragmentation: f64,
    /// Constant reserved for collective communication buffers.
    pub comm_buffer_bytes: u64,
    pub tags: MemoryTags,
}

impl Default for MemoryOptions {
    fn default() -> Self {
        MemoryOptions { optimizer_bytes_per_param: 8.0, fragmentation: 1.05, comm_buffer_bytes: 0, tags: MemoryTags::default() }
    }
}

/// Lifetime of one tensor over the step axis of a [`MemoryTimeline`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lifetime {
    pub tensor: TensorRef,
    pub component: Component,
    pub bytes: u64,
    /// First step at which the tensor is resident.
    pub alloc: usize,
    /// Last step at which it is resident; `None` means it is never freed.
    pub free: Option<usize>,
}

/// Allocated bytes over node-execution steps. Step 0 is before the first
/// node, step `i + 1` is while node `i` runs, and the last step is after
/// every transient tensor has been released.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryTimeline {
    pub curve: Vec<u64>,
    pub lifetimes: Vec<Lifetime>,
    pub peak_step: usize,
    /// Per-component bytes at the peak step.
    pub at_peak: BTreeMap<Component, u64>,
    /// Bytes that stay allocated after the step ends.
    pub persistent: BTreeMap<Component, u64>,
    pub max_allocated: u64,
    pub max_reserved: u64,
}

impl MemoryTimeline {
    pub fn final_bytes(&self) -> u64 {
        self.curve.last().copied().unwrap_or(0)
    }

    /// Per-component bytes resident at `step`.
    pub fn components_at(&self, step: usize) -> BTreeMap<Component, u64> {
        let mut out = BTreeMap::new();
        for l in self.lifetimes.iter().filter(|l| l.alloc <= step && l.free.is_none_or(|f| step <= f)) {
            *out.entry(l.component).or_insert(0) += l.bytes;
        }
        out
    }
}

fn shard(bytes: u64, by: u64) -> u64 {
    bytes.div_ceil(by.max(1))
}

/// Walks `g` in node order. Graph inputs are resident from step 0; node
/// outputs from their producer's step. Transients are released after their
/// last consumer (graph outputs at the end of the step); weights, weight
/// gradients, optimizer states and KV-cache tensors persist. Optimizer
/// states are charged only for joint graphs.
pub fn memory_timeline(g: &OperatorGraph, opts: &MemoryOptions) -> Result<MemoryTimeline> {
    let n = g.nodes.len();
    let last = n + 1;
    let mut position: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, nd) in g.nodes.iter().enumerate() {
        if position.insert(nd.id.as_str(), i).is_some() {
            return Err(Error::invalid(nd.id.clone(), "duplicate node id"));
        }
    }
    let input_names: BTreeSet<&str> = g.inputs.iter().map(|i| i.name.as_str()).collect();

    // Last reading step of every tensor.
    let mut last_use: BTreeMap<TensorRef, usize> = BTreeMap::new();
    for (i, nd) in g.nodes.iter().enumerate() {
        for r in &nd.inputs {
            match r {
                TensorRef::Input(name) if !input_names.contains(name.as_str()) => {
                    return Err(Error::DanglingRef { node: nd.id.clone(), reference: r.to_string() });
                }
                TensorRef::Output { node, index } => {
                    let Some(&p) = position.get(node.as_str()) else {
                        return Err(Error::DanglingRef { node: nd.id.clone(), reference: r.to_string() });
                    };
                    if p >= i {
                        return Err(Error::GraphOrder(format!("`{}` reads `{r}` before `{node}` produces it", nd.id)));
                    }
                    if *index >= g.nodes[p].outputs.len() {
                        return Err(Error::DanglingRef { node: nd.id.clone(), reference: r.to_string() });
                    }
                }
                _ => {}
            }
            last_use.insert(r.clone(), i + 1);
        }
    }
    let mut kept: BTreeSet<&TensorRef> = BTreeSet::new();
    let mut weight_grads: BTreeSet<&TensorRef> = BTreeSet::new();
    for o in &g.outputs {
        if g.resolve(&o.tensor).is_none() {
            return Err(Error::DanglingRef { node: o.name.clone(), reference: o.tensor.to_string() });
        }
        kept.insert(&o.tensor);
        let of_weight = o
            .name
            .strip_prefix("grad.")
            .and_then(|w| g.input(w))
            .is_some_and(|i| i.meta.role == TensorRole::Weight);
        if of_weight {
            weight_grads.insert(&o.tensor);
        }
    }

    let tags = &opts.tags;
    let mut lifetimes = Vec::new();
    let mut params = 0u64;
    for i in &g.inputs {
        let r = TensorRef::input(i.name.clone());
        let (component, bytes, persistent) = match i.meta.role {
            TensorRole::Weight => {
                params += i.meta.numel();
                (Component::Weights, shard(i.meta.bytes(), tags.weight_shard), true)
            }
            TensorRole::KvCache => (Component::KvCache, i.meta.bytes(), true),
            TensorRole::OptimizerState => (Component::OptimizerStates, shard(i.meta.bytes(), tags.optim_shard), true),
            TensorRole::Activation => (Component::Activations, i.meta.bytes(), false),
            TensorRole::Gradient | TensorRole::Buffer => (Component::Temporaries, i.meta.bytes(), false),
        };
        let free = if persistent {
            None
        } else if kept.contains(&r) {
            Some(n)
        } else {
            Some(last_use.get(&r).copied().unwrap_or(0))
        };
        lifetimes.push(Lifetime { tensor: r, component, bytes, alloc: 0, free });
    }
    if g.is_joint() && params > 0 {
        let bytes = libm::ceil(params as f64 * opts.optimizer_bytes_per_param / tags.optim_shard.max(1) as f64) as u64;
        lifetimes.push(Lifetime { tensor: TensorRef::input("optimizer_states"), component: Component::OptimizerStates, bytes, alloc: 0, free: None });
    }
    for (i, nd) in g.nodes.iter().enumerate() {
        let step = i + 1;
        for (k, meta) in nd.outputs.iter().enumerate() {
            let r = nd.out(k);
            let (component, bytes, persistent) = classify(nd.kind.is_comm(), nd.phase, meta, weight_grads.contains(&r), tags);
            let free = if persistent {
                None
            } else if kept.contains(&r) {
                Some(n)
            } else {
                Some(last_use.get(&r).copied().unwrap_or(step))
            };
            lifetimes.push(Lifetime { tensor: r, component, bytes, alloc: step, free });
        }
    }

    let mut delta = vec![0i128; last + 2];
    for l in &lifetimes {
        delta[l.alloc] += l.bytes as i128;
        if let Some(f) = l.free {
            delta[f + 1] -= l.bytes as i128;
        }
    }
    let mut curve = Vec::with_capacity(last + 1);
    let mut acc = 0i128;
    for d in delta.iter().take(last + 1) {
        acc += d;
        curve.push(acc as u64);
    }
    let (peak_step, max_allocated) = curve.iter().enumerate().fold((0, 0), |best, (s, &v)| if v > best.1 { (s, v) } else { best });
    let mut persistent = BTreeMap::new();
    for l in lifetimes.iter().filter(|l| l.free.is_none()) {
        *persistent.entry(l.component).or_insert(0) += l.bytes;
    }
    let mut t = MemoryTimeline { curve, lifetimes, peak_step, at_peak: BTreeMap::new(), persistent, max_allocated, max_reserved: 0 };
    t.at_peak = t.components_at(peak_step);
    t.max_reserved = reserved(max_allocated, opts);
    Ok(t)
}

fn classify(comm: bool, phase: Phase, meta: &TensorMeta, weight_grad: bool, tags: &MemoryTags) -> (Component, u64, bool) {
    let bytes = meta.bytes();
    if weight_grad {
        return (Component::Gradients, shard(bytes, tags.grad_shard), true);
    }
    match meta.role {
        TensorRole::KvCache => return (Component::KvCache, bytes, true),
        TensorRole::OptimizerState => return (Component::OptimizerStates, shard(bytes, tags.optim_shard), true),
        _ => {}
    }
    if comm {
        return (Component::CommBuffers, bytes, false);
    }
    match (meta.role, phase) {
        (TensorRole::Activation, Phase::Forward) => (Component::Activations, bytes, false),
        _ => (Component::Temporaries, bytes, false),
    }
}

pub fn reserved(allocated: u64, opts: &MemoryOptions) -> u64 {
    libm::ceil(allocated as f64 * opts.fragmentation) as u64 + opts.comm_buffer_bytes
}

/// KV-cache bytes: keys and values for every layer, head, position and sequence.
pub fn kv_cache_bytes(layers: u64, kv_heads: u64, head_dim: u64, seq: u64, batch: u64, elem: u64) -> u64 {
    2 * layers * kv_heads * head_dim * seq * batch * elem
}

/// Unrolls a single-block graph into `layers` consecutive copies in
/// execution order: every layer's forward nodes, the backward nodes from the
/// last layer to the first, then every layer's optimizer nodes. Layer `l`
/// reads `fwd_in` from layer `l - 1`'s `fwd_out` and `bwd_in` from layer
/// `l + 1`'s `bwd_out`; all other inputs are per layer.
pub fn expand_layers(g: &OperatorGraph, layers: u64, chain: &crate::parallel::ChainNames) -> Result<OperatorGraph> {
    if layers == 0 {
        return Err(Error::config("expand_layers needs at least one layer"));
    }
    if layers == 1 {
        return Ok(g.clone());
    }
    let fwd_out = g.output(&chain.fwd_out).map(|o| o.tensor.clone());
    let bwd_out = g.output(&chain.bwd_out).map(|o| o.tensor.clone());
    let has_fwd_in = g.input(&chain.fwd_in).is_some();
    let has_bwd_in = g.input(&chain.bwd_in).is_some();
    if fwd_out.is_none() || !has_fwd_in {
        return Err(Error::config(format!("expanding layers needs input `{}` and output `{}`", chain.fwd_in, chain.fwd_out)));
    }
    if has_bwd_in && bwd_out.is_none() {
        return Err(Error::config(format!("expanding layers needs output `{}`", chain.bwd_out)));
    }
    let prefix = |l: u64, s: &str| format!("L{l}.{s}");
    let rename = |l: u64, r: &TensorRef| -> TensorRef {
        match r {
            TensorRef::Input(name) if *name == chain.fwd_in && l > 0 => rename_out(l - 1, fwd_out.as_ref().unwrap()),
            TensorRef::Input(name) if *name == chain.bwd_in && l + 1 < layers => rename_out(l + 1, bwd_out.as_ref().unwrap()),
            TensorRef::Input(name) => TensorRef::input(prefix(l, name)),
            TensorRef::Output { node, index } => TensorRef::output(prefix(l, node), *index),
        }
    };
    let mut out = OperatorGraph::new();
    out.block_multiplier = 1;
    for l in 0..layers {
        for i in &g.inputs {
            let linked = (i.name == chain.fwd_in && l > 0) || (i.name == chain.bwd_in && l + 1 < layers);
            if !linked {
                out.add_input(prefix(l, &i.name), i.meta.clone());
            }
        }
    }
    let copy = |out: &mut OperatorGraph, l: u64, phase: Phase| {
        for nd in g.nodes.iter().filter(|n| n.phase == phase) {
            let mut c = nd.clone();
            c.id = prefix(l, &nd.id);
            c.inputs = nd.inputs.iter().map(|r| rename(l, r)).collect();
            out.nodes.push(c);
        }
    };
    for l in 0..layers {
        copy(&mut out, l, Phase::Forward);
    }
    for l in (0..layers).rev() {
        copy(&mut out, l, Phase::Backward);
    }
    for l in 0..layers {
        copy(&mut out, l, Phase::Optimizer);
    }
    for l in 0..layers {
        for o in &g.outputs {
            let linked = (o.name == chain.fwd_out && l + 1 < layers) || (o.name == chain.bwd_out && l > 0 && has_bwd_in);
            if !linked {
                out.add_output(prefix(l, &o.name), rename(l, &o.tensor));
            }
        }
    }
    Ok(out)
}

fn rename_out(l: u64, r: &TensorRef) -> TensorRef {
    match r {
        TensorRef::Output { node, index } => TensorRef::output(format!("L{l}.{node}"), *index),
        TensorRef::Input(name) => TensorRef::input(format!("L{l}.{name}")),
    }
}

/// Bytes of the forward tensors that backward reads, i.e. what one
/// in-flight microbatch keeps resident per layer.
pub fn saved_activation_bytes(g: &OperatorGraph) -> u64 {
    crate::graph::saved_activations(g).iter().filter_map(|r| g.resolve(r)).map(TensorMeta::bytes).sum()
}

/// Names every graph-output weight gradient (`grad.<weight>`).
pub fn weight_gradient_outputs(g: &OperatorGraph) -> Vec<String> {
    g.outputs
        .iter()
        .filter(|o| o.name.strip_prefix("grad.").and_then(|w| g.input(w)).is_some_and(|i| i.meta.role == TensorRole::Weight))
        .map(|o| o.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OpKind, OpNode, Precision};

    const MB: u64 = 1 << 20;

    fn act(bytes: u64) -> TensorMeta {
        TensorMeta::new([bytes], Precision::Int8, TensorRole::Activation)
    }

    fn chain() -> OperatorGraph {
        let mut g = OperatorGraph::new();
        let t0 = g.add_input("t0", act(4 * MB));
        let t1 = g.push(OpNode::new("op1", OpKind::Noop, Phase::Forward).with_inputs([t0]).with_output(act(4 * MB)));
        let t2 = g.push(OpNode::new("op2", OpKind::Noop, Phase::Forward).with_inputs([t1]).with_output(act(4 * MB)));
        g.add_output("t2", t2);
        g
    }

    #[test]
    fn chain_peaks_at_two_tensors() {
        let t = memory_timeline(&chain(), &MemoryOptions::default()).unwrap();
        assert_eq!(t.max_allocated, 8 * MB);
        assert_eq!(t.curve, [4 * MB, 8 * MB, 8 * MB, 0]);
        assert_eq!(t.final_bytes(), 0);
        assert!(t.max_reserved >= t.max_allocated);
    }

    #[test]
    fn weights_only_is_flat() {
        let mut g = OperatorGraph::new();
        g.add_input("w", TensorMeta::new([1000u64], Precision::Bf16, TensorRole::Weight));
        let t = memory_timeline(&g, &MemoryOptions::default()).unwrap();
        assert!(t.curve.iter().all(|&v| v == 2000));
        assert_eq!(t.persistent[&Component::Weights], 2000);
    }

    #[test]
    fn consumer_before_producer() {
        let mut g = chain();
        g.nodes.swap(0, 1);
        assert!(matches!(memory_timeline(&g, &MemoryOptions::default()), Err(Error::GraphOrder(_))));
    }

    #[test]
    fn reserved_adds_fragmentation_and_buffer() {
        let opts = MemoryOptions { comm_buffer_bytes: 7, ..MemoryOptions::default() };
        assert_eq!(reserved(1000, &opts), 1057);
    }

    #[test]
    fn kv_formula() {
        assert_eq!(kv_cache_bytes(2, 8, 128, 1024, 4, 2), 2 * 2 * 8 * 128 * 1024 * 4 * 2);
    }
}
