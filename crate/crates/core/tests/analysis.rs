mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{hw, mlp_layer, random_inference, random_joint, rng, tiny};
use opsim_core::analysis::*;
use opsim_core::graph::*;
use opsim_core::parallel::{apply_dp, build_program, ChainNames, DpMode, ParallelismConfig, PipelineSpec, ProgramMode};
use opsim_core::passes::{full_recompute_policy, recompute, PassPipeline, Recompute, RecomputePolicy};
use opsim_core::sched::{simulate, Priced, Program, Segment, SimOptions, Timeline};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn persistent_input(role: TensorRole) -> bool {
    matches!(role, TensorRole::Weight | TensorRole::KvCache | TensorRole::OptimizerState)
}

/// Steps the graph one node at a time, holding a live set and dropping a
/// tensor once no later node reads it. Returns bytes resident per step.
fn interpret(g: &OperatorGraph) -> Vec<u64> {
    let outputs: BTreeSet<TensorRef> = g.outputs.iter().map(|o| o.tensor.clone()).collect();
    let grads: BTreeSet<TensorRef> = weight_gradient_outputs(g).iter().map(|n| g.output(n).unwrap().tensor.clone()).collect();
    let mut pinned: u64 = 0;
    let mut live: BTreeMap<TensorRef, u64> = BTreeMap::new();
    let params: u64 = g.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.meta.numel()).sum();
    if g.is_joint() {
        pinned += params * 8;
    }
    for i in &g.inputs {
        if persistent_input(i.meta.role) {
            pinned += i.meta.bytes();
        } else {
            live.insert(TensorRef::input(i.name.clone()), i.meta.bytes());
        }
    }
    let read_from = |t: &TensorRef, from: usize| g.nodes[from..].iter().any(|n| n.inputs.contains(t));
    let mut curve = Vec::new();
    for step in 0..=g.nodes.len() {
        if step > 0 {
            let nd = &g.nodes[step - 1];
            for (k, m) in nd.outputs.iter().enumerate() {
                let r = nd.out(k);
                if grads.contains(&r) || persistent_input(m.role) && m.role != TensorRole::Weight {
                    pinned += m.bytes();
                } else {
                    live.insert(r, m.bytes());
                }
            }
        }
        curve.push(pinned + live.values().sum::<u64>());
        live.retain(|t, _| outputs.contains(t) || read_from(t, step));
    }
    curve.push(pinned);
    curve
}

fn activation_peak(t: &MemoryTimeline) -> u64 {
    (0..t.curve.len()).map(|s| t.components_at(s).get(&Component::Activations).copied().unwrap_or(0)).max().unwrap_or(0)
}

fn random_graph(r: &mut ChaCha8Rng) -> OperatorGraph {
    if r.random_bool(0.5) {
        random_joint(r, 30)
    } else {
        let n = r.random_range(1..=28);
        random_inference(r, n)
    }
}

fn sample_timeline() -> Timeline {
    let g = derive_backward(&mlp_layer(4, 16)).unwrap();
    let cfg = ParallelismConfig { microbatches: 4, ..ParallelismConfig::new(1, 2, 1) };
    let spec = PipelineSpec { graph: &g, cfg: &cfg, layers: vec![1, 1], training: true, mode: ProgramMode::Full, chain: ChainNames::default() };
    let (p, _) = build_program(&spec).unwrap();
    let price = |_: &Program, _: u32, s: &Segment| -> opsim_core::Result<Priced> {
        Ok(Priced::fixed(1000.0 + 37.5 * s.deps.len() as f64))
    };
    simulate(&p, &price, &SimOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(common::cases(600))]

    #[test]
    fn liveness_matches_interpreter(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r);
        prop_assert!(g.nodes.len() <= 30);
        let t = memory_timeline(&g, &MemoryOptions::default()).unwrap();
        let oracle = interpret(&g);
        prop_assert_eq!(&t.curve, &oracle);
        prop_assert_eq!(t.max_allocated, *oracle.iter().max().unwrap());
        prop_assert_eq!(t.final_bytes(), t.persistent.values().sum::<u64>());
        prop_assert_eq!(t.at_peak.values().sum::<u64>(), t.max_allocated);
    }

    #[test]
    fn recompute_never_raises_activation_peak(seed in any::<u64>()) {
        let mut r = rng(seed);
        let j = random_joint(&mut r, 30);
        let (rc, _) = PassPipeline::new().with(Recompute(RecomputePolicy::Full)).run(&j).unwrap();
        let opts = MemoryOptions::default();
        let before = memory_timeline(&j, &opts).unwrap();
        let after = memory_timeline(&rc, &opts).unwrap();
        prop_assert!(activation_peak(&after) <= activation_peak(&before));
        prop_assert!(saved_activation_bytes(&rc) <= saved_activation_bytes(&j));
        prop_assert_eq!(&interpret(&rc), &after.curve);
    }
}

#[test]
fn zero3_shards_weights_and_states() {
    let j = derive_backward(&build_block(&tiny()).unwrap()).unwrap();
    let dp = 4;
    let out = apply_dp(&j, dp, DpMode::Zero3, 1 << 20).unwrap();
    let plain = memory_timeline(&j, &MemoryOptions::default()).unwrap();
    let sharded = memory_timeline(&out.graph, &MemoryOptions { tags: out.tags, ..MemoryOptions::default() }).unwrap();
    let weights: u64 = j.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.meta.bytes().div_ceil(dp)).sum();
    let params: u64 = j.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.meta.numel()).sum();
    assert_eq!(sharded.persistent[&Component::Weights], weights);
    assert_eq!(sharded.persistent[&Component::OptimizerStates], (params * 8).div_ceil(dp));
    assert_eq!(plain.persistent[&Component::OptimizerStates], params * 8);
    assert!(sharded.persistent[&Component::Gradients] < plain.persistent[&Component::Gradients]);
}

#[test]
fn optimizer_states_only_for_training() {
    let g = build_block(&tiny()).unwrap();
    let t = memory_timeline(&g, &MemoryOptions::default()).unwrap();
    assert!(!t.persistent.contains_key(&Component::OptimizerStates));
    assert!(!t.persistent.contains_key(&Component::Gradients));
}

#[test]
fn expanded_layers_scale_persistent_bytes() {
    let j = derive_backward(&mlp_layer(4, 16)).unwrap();
    let one = memory_timeline(&j, &MemoryOptions::default()).unwrap();
    let three = memory_timeline(&expand_layers(&j, 3, &ChainNames::default()).unwrap(), &MemoryOptions::default()).unwrap();
    assert_eq!(three.persistent[&Component::Weights], 3 * one.persistent[&Component::Weights]);
    assert_eq!(three.persistent[&Component::OptimizerStates], 3 * one.persistent[&Component::OptimizerStates]);
    assert_eq!(three.curve, interpret(&expand_layers(&j, 3, &ChainNames::default()).unwrap()));
}

#[test]
fn mfu_examples() {
    let h = hw();
    assert_eq!(mfu(989e12, 1e9, &h, Precision::Bf16, 1).unwrap(), 1.0);
    assert_eq!(mfu(989e12, 1e9, &h, Precision::Bf16, 4).unwrap(), 0.25);
    assert_eq!(mfu(67e12, 2e9, &h, Precision::Fp32, 1).unwrap(), 0.5);
    assert_eq!(mfu(1.0, 0.0, &h, Precision::Bf16, 1).unwrap(), 0.0);
    assert!(mfu(1.0, 1.0, &h, Precision::Fp8, 1).is_err());
    assert!(mfu(1.0, 1.0, &h, Precision::Bf16, 0).unwrap_err().is_config());
}

#[test]
fn recompute_keeps_model_flops() {
    let j = derive_backward(&build_block(&tiny()).unwrap()).unwrap();
    let (rc, _) = recompute(&j, &full_recompute_policy(&j)).unwrap();
    let t = Timeline { makespan_ns: 1e6, ..Timeline::default() };
    let a = flops_summary(&j, &t, &hw(), 1).unwrap();
    let b = flops_summary(&rc, &t, &hw(), 1).unwrap();
    assert!(rc.flops().unwrap() > j.flops().unwrap());
    assert_eq!(a, b);
}

#[test]
fn breakdown_partitions_busy_time() {
    let t = sample_timeline();
    for rank in [None, Some(0), Some(1)] {
        for map in [CategoryMap::standard(), CategoryMap::single(OTHERS)] {
            let b = breakdown(&t, &map, rank);
            assert!((b.total() - busy_sum(&t, rank)).abs() < 1e-6);
        }
    }
}

#[test]
fn trace_document_is_well_formed() {
    let t = sample_timeline();
    let doc = trace_events(&t);
    assert_eq!(doc.trace_events.len(), t.entries.len());
    assert!(doc.trace_events.iter().all(|e| e.dur >= 0.0 && e.ts >= 0.0 && e.ph == "X"));
    let keys: Vec<_> = doc.trace_events.iter().map(|e| (e.pid, e.tid, e.ts)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
    assert_eq!(keys, sorted);
    let json = serde_json::to_string(&doc).unwrap();
    assert!(json.starts_with("{\"traceEvents\":["));
    assert_eq!(serde_json::from_str::<TraceDocument>(&json).unwrap(), doc);
}

#[test]
fn operator_table_sums_to_busy_time() {
    let t = sample_timeline();
    let rows = operator_table(&t);
    let total: f64 = rows.iter().map(|r| r.total_ns).sum();
    assert!((total - busy_sum(&t, None)).abs() < 1e-6);
    assert!(rows.windows(2).all(|w| w[0].total_ns >= w[1].total_ns));
    assert_eq!(rows.iter().map(|r| r.count).sum::<u64>() as usize, t.entries.len());
}


