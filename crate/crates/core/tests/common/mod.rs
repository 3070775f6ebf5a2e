#![allow(dead_code)]

use opsim_core::engines::{two_tier, HardwareSpec, TierKind};
use opsim_core::graph::{attr, EltwiseOp, ModelConfig, OpKind, OpNode, OperatorGraph, Phase, Precision, TensorMeta, TensorRef, TensorRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two nodes of eight devices each, h100-like.
pub fn hw() -> HardwareSpec {
    let mut hw = HardwareSpec::device("h100", &[(Precision::Bf16, 989e12), (Precision::Fp32, 67e12)], 3.35e12);
    hw.launch_overhead = 2e-6;
    hw.mem_capacity = 80e9;
    hw.topology = two_tier(8, 2, (TierKind::Switch, 1e-6, 450e9), (5e-6, 50e9, 8));
    hw
}

pub fn tiny() -> ModelConfig {
    ModelConfig::dense(512, 8, 1408, 4, 16, 256)
}

fn act(shape: &[u64]) -> TensorMeta {
    TensorMeta::new(shape.to_vec(), Precision::Bf16, TensorRole::Activation)
}

/// Random forward-only graph over `[b, h]` activations: matmuls against
/// fresh weights, adds of two earlier tensors and unary activations. Every
/// node feeds something downstream or a graph output.
pub fn random_forward(r: &mut ChaCha8Rng, nodes: usize) -> OperatorGraph {
    let b = 1 + r.random_range(0..4u64) * 4;
    let h = 8 << r.random_range(0..3u64);
    let mut g = OperatorGraph::new();
    let mut pool = vec![g.add_input("x", act(&[b, h]))];
    if r.random_bool(0.3) {
        pool.push(g.add_input("x2", act(&[b, h])));
    }
    for i in 0..nodes {
        let a = pool[r.random_range(0..pool.len())].clone();
        let n = match r.random_range(0..4) {
            0 | 1 => {
                let w = g.add_input(format!("w{i}"), TensorMeta::new([h, h], Precision::Bf16, TensorRole::Weight));
                OpNode::new(format!("mm{i}"), OpKind::Matmul, Phase::Forward).with_inputs([a, w])
            }
            2 => {
                let c = pool[r.random_range(0..pool.len())].clone();
                OpNode::new(format!("add{i}"), OpKind::Elementwise(EltwiseOp::Add), Phase::Forward).with_inputs([a, c])
            }
            _ => {
                let op = if r.random_bool(0.5) { EltwiseOp::Gelu } else { EltwiseOp::Silu };
                OpNode::new(format!("act{i}"), OpKind::Elementwise(op), Phase::Forward).with_inputs([a])
            }
        };
        pool.push(g.push(n.with_output(act(&[b, h]))));
    }
    g.add_output("y", pool.last().unwrap().clone());
    if nodes > 2 && r.random_bool(0.3) {
        g.add_output("aux", pool[pool.len() - 2].clone());
    }
    g
}

/// Forward graph of a block's worth of ops with optional KV-cache and
/// buffer inputs, not necessarily differentiable.
pub fn random_inference(r: &mut ChaCha8Rng, nodes: usize) -> OperatorGraph {
    let mut g = random_forward(r, nodes);
    if r.random_bool(0.5) {
        g.add_input("kv", TensorMeta::new([64, 32], Precision::Bf16, TensorRole::KvCache));
    }
    if r.random_bool(0.5) {
        g.add_input("scratch", TensorMeta::new([128], Precision::Fp32, TensorRole::Buffer));
    }
    if r.random_bool(0.5) {
        let x = TensorRef::input("x");
        let meta = g.resolve(&x).unwrap().clone();
        g.push(
            OpNode::new("ar", OpKind::AllReduce, Phase::Forward)
                .with_inputs([x])
                .with_output(meta)
                .with_attr(attr::GROUP, "tp"),
        );
    }
    g
}

/// Random joint graph of at most `max_nodes` nodes.
pub fn random_joint(r: &mut ChaCha8Rng, max_nodes: usize) -> OperatorGraph {
    loop {
        let k = r.random_range(1..=max_nodes / 3);
        let fwd = random_forward(r, k);
        let j = opsim_core::graph::derive_backward(&fwd).unwrap();
        if j.nodes.len() <= max_nodes {
            return j;
        }
    }
}

/// `x -> matmul(w) -> gelu -> y` with backward, linkable as a layer chain.
pub fn mlp_layer(b: u64, h: u64) -> OperatorGraph {
    let mut g = OperatorGraph::new();
    let x = g.add_input("x", act(&[b, h]));
    let w = g.add_input("w", TensorMeta::new([h, h], Precision::Bf16, TensorRole::Weight));
    let m = g.push(OpNode::new("mm", OpKind::Matmul, Phase::Forward).with_inputs([x, w]).with_output(act(&[b, h])));
    let y = g.push(OpNode::new("gelu", OpKind::Elementwise(EltwiseOp::Gelu), Phase::Forward).with_inputs([m]).with_output(act(&[b, h])));
    g.add_output("y", y);
    g
}

/// Proptest settings without on-disk failure persistence.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases: n, failure_persistence: None, ..Default::default() }
}
