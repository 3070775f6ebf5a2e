mod common;

use std::collections::BTreeMap;

use common::{mlp_layer, rng};
use opsim_core::graph::*;
use opsim_core::parallel::*;
use opsim_core::sched::{simulate, SegmentOp, SimOptions, TaskPricer};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense configuration whose head, kv-head, ffn and sequence sizes split over 8.
pub fn random_dense(r: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [8, 16][r.random_range(0..2)];
    let head_dim = [8, 16, 32][r.random_range(0..3)];
    let mut c = ModelConfig::dense(heads * head_dim, heads, 8 * r.random_range(4..40), 2, r.random_range(1..4), 8 * r.random_range(1..9));
    c.num_kv_heads = [8, heads][r.random_range(0..2)];
    c
}

/// MoE configuration whose routed tokens divide evenly among experts.
pub fn random_moe(r: &mut ChaCha8Rng) -> ModelConfig {
    let mut c = random_dense(r);
    let experts = [4, 8][r.random_range(0..2)];
    c.batch = 1;
    c.seq_len = experts * r.random_range(1..6);
    c.moe = Some(MoeConfig { num_experts: experts, top_k: r.random_range(1..=2), expert_ffn_hidden: 8 * r.random_range(4..20), load_factor: Vec::new() });
    c
}

fn payload_elems(g: &OperatorGraph, n: &OpNode) -> u64 {
    let idx = g.index();
    let i = idx[n.id.as_str()];
    comm_payload_bytes(n, &g.input_metas(&idx, i).unwrap()) / n.outputs[0].dtype.bytes()
}

/// Largest number of microbatches whose forward has run but whose backward
/// has not finished, replayed from the slot list in start order.
fn peak_in_flight(slots: &[Slot]) -> u64 {
    let mut v: Vec<&Slot> = slots.iter().collect();
    v.sort_by_key(|s| s.start);
    let (mut cur, mut peak) = (0i64, 0i64);
    for s in v {
        cur += if s.kind == SlotKind::Forward { 1 } else { -1 };
        peak = peak.max(cur);
    }
    peak as u64
}

proptest! {
    #![proptest_config(common::cases(100))]

    #[test]
    fn tp_conserves_flops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = random_dense(&mut r);
        let g = build_block(&c).unwrap();
        let joint = derive_backward(&g).unwrap();
        for tp in [1, 2, 4, 8] {
            for sp in [false, true] {
                let s = apply_tp(&g, tp, sp).unwrap();
                prop_assert_eq!(s.group_flops(tp).unwrap(), g.flops().unwrap(), "tp {} sp {}", tp, sp);
                let sj = derive_backward(&s).unwrap();
                prop_assert_eq!(sj.group_flops(tp).unwrap(), joint.flops().unwrap(), "joint tp {} sp {}", tp, sp);
            }
        }
    }

    #[test]
    fn ep_conserves_flops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = random_moe(&mut r);
        let g = build_block(&c).unwrap();
        let experts = c.moe.as_ref().unwrap().num_experts;
        for ep in [1, 2, 4].into_iter().filter(|e| experts.is_multiple_of(*e)) {
            let s = apply_ep(&g, ep).unwrap();
            prop_assert_eq!(s.flops().unwrap(), g.flops().unwrap(), "ep {}", ep);
            prop_assert_eq!(derive_backward(&s).unwrap().flops().unwrap(), derive_backward(&g).unwrap().flops().unwrap());
        }
    }

    #[test]
    fn dp_modes_conserve_flops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = random_dense(&mut r);
        let j = derive_backward(&build_block(&c).unwrap()).unwrap();
        let dp = [2, 4, 8][r.random_range(0..3)];
        for mode in [DpMode::Ddp, DpMode::Zero1, DpMode::Zero2, DpMode::Zero3, DpMode::Fsdp] {
            let out = apply_dp(&j, dp, mode, 1 << r.random_range(10..20)).unwrap();
            prop_assert_eq!(out.graph.flops().unwrap(), j.flops().unwrap(), "{}", mode);
            prop_assert!(out.graph.validate().is_ok());
        }
    }

    #[test]
    fn tp_comm_law(seed in any::<u64>(), tp in prop::sample::select(vec![2u64, 4, 8])) {
        let mut r = rng(seed);
        let c = random_dense(&mut r);
        let bsh = c.batch * c.seq_len * c.hidden_size;
        let g = derive_backward(&apply_tp(&build_block(&c).unwrap(), tp, false).unwrap()).unwrap();
        for phase in [Phase::Forward, Phase::Backward] {
            let ars: Vec<&OpNode> = g.nodes.iter().filter(|n| n.kind == OpKind::AllReduce && n.phase == phase).collect();
            prop_assert_eq!(ars.len(), 2);
            for n in ars {
                prop_assert_eq!(payload_elems(&g, n), bsh);
                prop_assert_eq!(n.attr_u64(attr::GROUP_SIZE), Some(tp));
            }
        }
        let sp = apply_tp(&build_block(&c).unwrap(), tp, true).unwrap();
        let ag = sp.nodes.iter().filter(|n| n.kind == OpKind::AllGather).count();
        let rs = sp.nodes.iter().filter(|n| n.kind == OpKind::ReduceScatter).count();
        prop_assert_eq!((ag, rs), (2, 2));
        prop_assert!(sp.nodes.iter().all(|n| n.kind != OpKind::AllReduce));
    }

    #[test]
    fn one_f_one_b_in_flight(p in 1u64..=8, extra in 0u64..=8) {
        let m = p + extra;
        let slots = slot_schedule(p, m, PpSchedule::OneFOneB, true).unwrap();
        for (s, dev) in slots.iter().enumerate() {
            prop_assert_eq!(peak_in_flight(dev), (p - s as u64).min(m));
            prop_assert_eq!(dev.len() as u64, 2 * m);
        }
    }

    #[test]
    fn pipeline_programs_pair_and_terminate(p in 1u64..=8, m in 1u64..=16, dualpipe in any::<bool>()) {
        let m = m.max(p);
        let schedule = if dualpipe && p % 2 == 0 && m % 2 == 0 { PpSchedule::Dualpipe } else { PpSchedule::OneFOneB };
        let cfg = ParallelismConfig { microbatches: m, pp_schedule: schedule, ..ParallelismConfig::new(1, p, 1) };
        let g = derive_backward(&mlp_layer(4, 16)).unwrap();
        let spec = PipelineSpec { graph: &g, cfg: &cfg, layers: vec![1; p as usize], training: true, mode: ProgramMode::Full, chain: ChainNames::default() };
        let (prog, _) = build_program(&spec).unwrap();
        let mut sends = BTreeMap::new();
        let mut recvs = BTreeMap::new();
        for rp in &prog.ranks {
            for s in &rp.segments {
                match &s.op {
                    SegmentOp::Send { peer, tag, bytes } => prop_assert!(sends.insert((rp.rank, *peer, *tag), *bytes).is_none()),
                    SegmentOp::Recv { peer, tag, bytes } => prop_assert!(recvs.insert((*peer, rp.rank, *tag), *bytes).is_none()),
                    _ => {}
                }
            }
        }
        prop_assert_eq!(&sends, &recvs);
        // One activation and one gradient transfer per microbatch per boundary.
        prop_assert_eq!(sends.len() as u64, 2 * m * (p - 1));
        let t = simulate(&prog, &TaskPricer, &SimOptions::default());
        prop_assert!(t.is_ok(), "{:?}", t.err());
    }
}

#[test]
fn ep_on_dense_and_joint_graphs_is_rejected() {
    let mut r = rng(1);
    let moe = build_block(&random_moe(&mut r)).unwrap();
    assert!(apply_ep(&derive_backward(&moe).unwrap(), 2).is_err());
    let dense = build_block(&random_dense(&mut r)).unwrap();
    assert!(apply_ep(&dense, 2).unwrap_err().is_config());
}

#[test]
fn tp_before_backward_and_dp_after() {
    let g = build_block(&ModelConfig::dense(64, 8, 128, 1, 2, 16)).unwrap();
    let j = derive_backward(&g).unwrap();
    assert!(apply_tp(&j, 2, false).is_err());
    assert!(apply_dp(&g, 2, DpMode::Ddp, 1 << 20).is_err());
    assert!(apply_dp(&j, 2, DpMode::Ddp, 1 << 20).is_ok());
}

#[test]
fn zero_modes_tag_memory() {
    let j = derive_backward(&build_block(&ModelConfig::dense(64, 8, 128, 1, 2, 16)).unwrap()).unwrap();
    let tags = |m| apply_dp(&j, 4, m, 1 << 20).unwrap().tags;
    assert_eq!(tags(DpMode::Ddp), MemoryTags::default());
    assert_eq!(tags(DpMode::Zero1), MemoryTags { weight_shard: 1, grad_shard: 1, optim_shard: 4 });
    assert_eq!(tags(DpMode::Zero2), MemoryTags { weight_shard: 1, grad_shard: 4, optim_shard: 4 });
}

#[test]
fn rank_grid_round_trip() {
    for order in ["tp,dp,pp", "pp,tp,dp", "dp,pp,tp"] {
        let c = ParallelismConfig { rank_order: order.into(), ..ParallelismConfig::new(2, 4, 2) };
        for rank in 0..16 {
            let co = c.coords(rank).unwrap();
            assert_eq!(c.rank_of(co).unwrap(), rank);
            for axis in [Axis::Tp, Axis::Pp, Axis::Dp] {
                assert!(c.group(rank, axis).unwrap().contains(&rank));
            }
        }
    }
}
