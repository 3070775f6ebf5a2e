mod common;

use std::collections::BTreeSet;

use common::{random_forward, random_joint, rng, tiny};
use opsim_core::graph::*;
use opsim_core::Error;
use proptest::prelude::*;

/// Matmul FLOPs computed from shapes alone.
fn matmul_oracle(g: &OperatorGraph) -> u64 {
    g.nodes
        .iter()
        .filter(|n| n.kind == OpKind::Matmul)
        .map(|n| {
            let a = g.resolve(&n.inputs[0]).unwrap();
            let b = g.resolve(&n.inputs[1]).unwrap();
            2 * a.shape[0] * a.shape[1] * b.shape[1]
        })
        .sum()
}

/// Weights with a path to some graph output, found by a reverse walk.
fn reaching_weights(g: &OperatorGraph) -> BTreeSet<String> {
    let mut live: BTreeSet<TensorRef> = g.outputs.iter().map(|o| o.tensor.clone()).collect();
    for n in g.nodes.iter().rev() {
        if (0..n.outputs.len()).any(|k| live.contains(&n.out(k))) {
            live.extend(n.inputs.iter().cloned());
        }
    }
    g.inputs
        .iter()
        .filter(|i| i.meta.role == TensorRole::Weight && live.contains(&TensorRef::input(i.name.clone())))
        .map(|i| i.name.clone())
        .collect()
}

proptest! {
    #![proptest_config(common::cases(128))]

    #[test]
    fn generated_graphs_are_topological(seed in any::<u64>(), n in 1usize..12) {
        let mut r = rng(seed);
        let g = random_forward(&mut r, n);
        prop_assert!(g.validate().is_ok());
        let j = derive_backward(&g).unwrap();
        prop_assert!(j.validate().is_ok());
        let pos = j.index();
        for (i, nd) in j.nodes.iter().enumerate() {
            for src in nd.inputs.iter().filter_map(|t| t.node()) {
                prop_assert!(pos[src] < i);
            }
        }
    }

    #[test]
    fn toposort_restores_shuffled_order(seed in any::<u64>(), n in 2usize..10) {
        let mut r = rng(seed);
        let g = derive_backward(&random_forward(&mut r, n)).unwrap();
        let mut s = g.clone();
        s.nodes.reverse();
        s.toposort().unwrap();
        prop_assert!(s.validate().is_ok());
        let a: BTreeSet<_> = g.nodes.iter().map(|n| n.id.clone()).collect();
        let b: BTreeSet<_> = s.nodes.iter().map(|n| n.id.clone()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(g.flops().unwrap(), s.flops().unwrap());
    }

    #[test]
    fn backward_rejects_joint_graphs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let j = random_joint(&mut r, 30);
        prop_assert!(derive_backward(&j).is_err());
    }

    #[test]
    fn weight_gradient_bijection(seed in any::<u64>(), n in 1usize..12) {
        let mut r = rng(seed);
        let g = random_forward(&mut r, n);
        let j = derive_backward(&g).unwrap();
        let weights: BTreeSet<String> = g
            .inputs
            .iter()
            .filter(|i| i.meta.role == TensorRole::Weight)
            .map(|i| i.name.clone())
            .collect();
        let grads: BTreeSet<String> = j.outputs.iter().filter_map(|o| o.name.strip_prefix("grad.")).filter(|w| weights.contains(*w)).map(String::from).collect();
        prop_assert_eq!(&grads, &reaching_weights(&g));
        for w in &grads {
            let gm = j.resolve(&j.output(&format!("grad.{w}")).unwrap().tensor).unwrap();
            let wm = &j.input(w).unwrap().meta;
            prop_assert_eq!(&gm.shape, &wm.shape);
            prop_assert_eq!(gm.role, TensorRole::Gradient);
        }
        let tensors: Vec<_> = grads.iter().map(|w| j.output(&format!("grad.{w}")).unwrap().tensor.clone()).collect();
        let distinct: BTreeSet<_> = tensors.iter().collect();
        prop_assert_eq!(distinct.len(), tensors.len());
    }

    #[test]
    fn flops_are_additive(seed in any::<u64>(), n in 1usize..12) {
        let mut r = rng(seed);
        let g = random_forward(&mut r, n);
        let j = derive_backward(&g).unwrap();
        let per_node: u64 = j.node_flops().unwrap().iter().sum();
        prop_assert_eq!(j.flops().unwrap(), per_node);
        prop_assert_eq!(j.phase_flops(Phase::Forward).unwrap(), g.flops().unwrap());
        prop_assert_eq!(
            j.flops().unwrap(),
            j.phase_flops(Phase::Forward).unwrap() + j.phase_flops(Phase::Backward).unwrap() + j.phase_flops(Phase::Optimizer).unwrap()
        );
        prop_assert!(g.flops().unwrap() >= matmul_oracle(&g));
    }

    #[test]
    fn serde_round_trip(seed in any::<u64>(), n in 1usize..10) {
        let mut r = rng(seed);
        let j = derive_backward(&random_forward(&mut r, n)).unwrap();
        let s = serde_json::to_string(&j).unwrap();
        let back: OperatorGraph = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(&back, &j);
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}

#[test]
fn matmul_chain_backward_is_twice_forward() {
    let mut g = OperatorGraph::new();
    let mut x = g.add_input("x", TensorMeta::new([16, 64], Precision::Bf16, TensorRole::Activation));
    for i in 0..3 {
        let w = g.add_input(format!("w{i}"), TensorMeta::new([64, 64], Precision::Bf16, TensorRole::Weight));
        x = g.push(
            OpNode::new(format!("mm{i}"), OpKind::Matmul, Phase::Forward)
                .with_inputs([x, w])
                .with_output(TensorMeta::new([16, 64], Precision::Bf16, TensorRole::Activation)),
        );
    }
    g.add_output("y", x);
    let fwd = 3 * 2 * 16 * 64 * 64;
    assert_eq!(g.flops().unwrap(), fwd);
    let j = derive_backward(&g).unwrap();
    assert_eq!(j.phase_flops(Phase::Backward).unwrap(), 2 * fwd);
    let grads: BTreeSet<_> = j.outputs.iter().map(|o| o.name.as_str()).collect();
    assert_eq!(grads, BTreeSet::from(["y", "grad.x", "grad.w0", "grad.w1", "grad.w2"]));
}

#[test]
fn dangling_and_cycle_errors() {
    let mut g = OperatorGraph::new();
    let m = TensorMeta::new([4], Precision::Fp32, TensorRole::Activation);
    g.push(OpNode::new("a", OpKind::Elementwise(EltwiseOp::Gelu), Phase::Forward).with_inputs([TensorRef::input("nope")]).with_output(m.clone()));
    assert!(matches!(g.validate(), Err(Error::DanglingRef { .. })));

    let mut c = OperatorGraph::new();
    c.push(OpNode::new("a", OpKind::Elementwise(EltwiseOp::Gelu), Phase::Forward).with_inputs([TensorRef::output("b", 0)]).with_output(m.clone()));
    c.push(OpNode::new("b", OpKind::Elementwise(EltwiseOp::Gelu), Phase::Forward).with_inputs([TensorRef::output("a", 0)]).with_output(m));
    assert!(matches!(c.validate(), Err(Error::Cycle(_))));
}

#[test]
fn generated_blocks_validate() {
    let dense = build_block(&tiny()).unwrap();
    assert!(dense.validate().is_ok());
    assert_eq!(dense.block_multiplier, tiny().num_layers);
    let j = derive_backward(&dense).unwrap();
    assert!(j.is_joint());
    assert!(derive_backward(&j).is_err());

    let mut moe = tiny();
    moe.moe = Some(MoeConfig { num_experts: 8, top_k: 2, expert_ffn_hidden: 256, load_factor: Vec::new() });
    let g = build_block(&moe).unwrap();
    assert!(g.nodes.iter().any(|n| n.kind == OpKind::RouterTopk));
    assert!(derive_backward(&g).unwrap().validate().is_ok());

    let d = build_decode_block(&tiny(), 512).unwrap();
    assert!(d.inputs.iter().any(|i| i.meta.role == TensorRole::KvCache));
    assert!(build_prefill_chunk(&tiny(), 128, 128).unwrap().validate().is_ok());
}
