mod common;

use std::collections::BTreeMap;

use common::{random_forward, rng, tiny};
use opsim_core::graph::*;
use opsim_core::passes::rewrite::builtin_rewrites;
use opsim_core::passes::*;
use proptest::prelude::*;
use rand::Rng;

fn output_shapes(g: &OperatorGraph) -> BTreeMap<String, Vec<u64>> {
    g.outputs.iter().map(|o| (o.name.clone(), g.resolve(&o.tensor).unwrap().shape.clone())).collect()
}

/// Sprinkles no-ops and duplicated nodes into a forward graph, plus one
/// dead branch.
fn with_redundancy(seed: u64, n: usize) -> OperatorGraph {
    let mut r = rng(seed);
    let g = random_forward(&mut r, n);
    let mut out = OperatorGraph { nodes: Vec::new(), ..g.clone() };
    for nd in &g.nodes {
        out.nodes.push(nd.clone());
        if r.random_bool(0.3) {
            let mut dup = nd.clone();
            dup.id = format!("{}_dup", nd.id);
            out.nodes.push(dup);
        }
        if r.random_bool(0.3) {
            let meta = nd.outputs[0].clone();
            let id = format!("{}_noop", nd.id);
            out.nodes.push(OpNode::new(&id, OpKind::Noop, Phase::Forward).with_inputs([nd.out(0)]).with_output(meta));
            out.replace_uses(&nd.out(0), &TensorRef::output(&id, 0), out.nodes.len());
        }
    }
    let x = TensorRef::input("x");
    let meta = out.resolve(&x).unwrap().clone();
    out.push(OpNode::new("dead", OpKind::Elementwise(EltwiseOp::Gelu), Phase::Forward).with_inputs([x]).with_output(meta));
    out
}

fn fuse_all() -> PassPipeline {
    PassPipeline::new().with(Fuse(builtin_rewrites()))
}

proptest! {
    #![proptest_config(common::cases(128))]

    #[test]
    fn passes_preserve_validity_and_output_shapes(seed in any::<u64>(), n in 1usize..12) {
        let g = with_redundancy(seed, n);
        prop_assert!(g.validate().is_ok());
        let shapes = output_shapes(&g);
        let pipe = PassPipeline::new().with(Canonicalize).with(Backward).with(Recompute(RecomputePolicy::Full)).with(Fuse(builtin_rewrites()));
        let (out, reports) = pipe.run(&g).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert_eq!(reports.len(), 4);
        for (name, shape) in &shapes {
            prop_assert_eq!(&out.resolve(&out.output(name).unwrap().tensor).unwrap().shape, shape);
        }
    }

    #[test]
    fn fusion_conserves_flops(seed in any::<u64>(), n in 1usize..12) {
        let mut r = rng(seed);
        let g = random_forward(&mut r, n);
        let (f, _) = fuse_all().run(&g).unwrap();
        prop_assert_eq!(f.flops().unwrap(), g.flops().unwrap());
        let j = derive_backward(&g).unwrap();
        let (fj, _) = fuse_all().run(&j).unwrap();
        prop_assert_eq!(fj.flops().unwrap(), j.flops().unwrap());
        prop_assert!(fj.nodes.len() <= j.nodes.len());
    }

    #[test]
    fn canonicalize_reaches_a_fixpoint(seed in any::<u64>(), n in 1usize..12) {
        let g = with_redundancy(seed, n);
        let (once, removed) = canonicalize(&g).unwrap();
        prop_assert!(removed >= 1);
        prop_assert!(once.node("dead").is_none());
        prop_assert!(once.nodes.iter().all(|n| n.kind != OpKind::Noop));
        let (twice, again) = canonicalize(&once).unwrap();
        prop_assert_eq!(again, 0);
        prop_assert_eq!(&twice, &once);
    }

    #[test]
    fn pipelines_are_deterministic(seed in any::<u64>(), n in 1usize..12) {
        let g = with_redundancy(seed, n);
        let specs: Vec<PassSpec> = serde_json::from_str(
            r#"[{"name":"canonicalize"},{"name":"backward"},{"name":"recompute","params":{"policy":"full"}},{"name":"fuse"}]"#,
        ).unwrap();
        let a = PassPipeline::from_specs(&specs).unwrap().run(&g).unwrap();
        let b = PassPipeline::from_specs(&specs).unwrap().run(&g).unwrap();
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.1, b.1);
    }

}

#[test]
fn fusion_on_a_block() {
    let g = build_block(&tiny()).unwrap();
    let (f, reports) = fuse_all().run(&g).unwrap();
    assert!(reports[0].matches > 0);
    assert!(f.nodes.len() < g.nodes.len());
    assert_eq!(f.flops().unwrap(), g.flops().unwrap());
    assert!(f.nodes.iter().any(|n| matches!(n.kind, OpKind::Fused(_))));
}

#[test]
fn recompute_adds_backward_clones() {
    let j = derive_backward(&build_block(&tiny()).unwrap()).unwrap();
    let policy = full_recompute_policy(&j);
    assert!(!policy.is_empty());
    let (rc, clones) = recompute(&j, &policy).unwrap();
    assert!(clones > 0);
    assert!(rc.flops().unwrap() > j.flops().unwrap());
    assert_eq!(rc.phase_flops(Phase::Forward).unwrap(), j.phase_flops(Phase::Forward).unwrap());
    assert!(recompute(&build_block(&tiny()).unwrap(), &policy).is_err());
}

#[test]
fn quantize_keeps_shapes() {
    let g = build_block(&tiny()).unwrap();
    let map = BTreeMap::from([("matmul".to_string(), Precision::Fp8)]);
    let (q, n) = quantize(&g, &map).unwrap();
    assert!(n > 0);
    assert_eq!(output_shapes(&q), output_shapes(&g));
    assert_eq!(q.flops().unwrap(), g.flops().unwrap());
}

#[test]
fn bad_specs_are_config_errors() {
    for spec in [r#"{"name":"nope"}"#, r#"{"name":"fuse","params":{"rules":["nope"]}}"#, r#"{"name":"canonicalize","params":{"x":1}}"#] {
        let s: PassSpec = serde_json::from_str(spec).unwrap();
        assert!(pass_from_spec(&s).err().unwrap().is_config(), "{spec}");
    }
}
