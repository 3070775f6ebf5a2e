use opsim_core::engines::*;
use opsim_core::graph::{attr, EltwiseOp, OpKind, OpNode, Phase, Precision, TensorMeta, TensorRef, TensorRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn act(shape: &[u64], p: Precision) -> TensorMeta {
    TensorMeta::new(shape.to_vec(), p, TensorRole::Activation)
}

fn node(kind: OpKind, ins: &[TensorMeta], out: TensorMeta) -> (OpNode, Vec<TensorMeta>) {
    let n = OpNode::new("n", kind, Phase::Forward)
        .with_inputs((0..ins.len()).map(|i| TensorRef::input(format!("i{i}"))))
        .with_output(out);
    (n, ins.to_vec())
}

fn matmul(m: u64, k: u64, n: u64, p: Precision) -> (OpNode, Vec<TensorMeta>) {
    node(OpKind::Matmul, &[act(&[m, k], p), act(&[k, n], p)], act(&[m, n], p))
}

fn hw() -> HardwareSpec {
    HardwareSpec::device("synthetic", &[(Precision::Bf16, 1e14), (Precision::Fp32, 5e13)], 2e12)
}

fn price(n: &(OpNode, Vec<TensorMeta>), hw: &HardwareSpec) -> f64 {
    let refs: Vec<&TensorMeta> = n.1.iter().collect();
    roofline_time(&n.0, &refs, hw).unwrap()
}

#[test]
fn roofline_matmul_compute_bound() {
    // 2 * 4096^3 / 1e14 s versus 3 * 4096^2 * 2 bytes / 2e12 s.
    let t = price(&matmul(4096, 4096, 4096, Precision::Bf16), &hw());
    let oracle = 2.0 * 4096f64.powi(3) / 1e14 * 1e9;
    assert!((t - oracle).abs() < 1e-6);
    assert!((t / 1e3 - 1374.4).abs() < 0.1);
}

#[test]
fn roofline_add_memory_bound() {
    let x = act(&[1_000_000], Precision::Fp32);
    let t = price(&node(OpKind::Elementwise(EltwiseOp::Add), &[x.clone(), x.clone()], x), &hw());
    assert!((t / 1e3 - 6.0).abs() < 0.01);
}

#[test]
fn roofline_missing_precision() {
    let n = matmul(64, 64, 64, Precision::Fp8);
    let refs: Vec<&TensorMeta> = n.1.iter().collect();
    assert!(roofline_time(&n.0, &refs, &hw()).is_err());
}

#[test]
fn precision_halves_memory_term() {
    let mut h = hw();
    h.peak_flops.insert(Precision::Fp8, 1e14);
    let x16 = act(&[1 << 20], Precision::Bf16);
    let x8 = act(&[1 << 20], Precision::Fp8);
    let a = price(&node(OpKind::Elementwise(EltwiseOp::Add), &[x16.clone(), x16.clone()], x16), &h);
    let b = price(&node(OpKind::Elementwise(EltwiseOp::Add), &[x8.clone(), x8.clone()], x8), &h);
    assert_eq!(a, 2.0 * b);
}

fn ring_hw(p: u32, alpha: f64, b: f64) -> HardwareSpec {
    let mut h = hw();
    h.topology = vec![LinkTier { kind: TierKind::Ring, level: 0, members: (0..p).collect(), alpha, bandwidth: b, links_per_node: 1 }];
    h
}

#[test]
fn ring_all_reduce_closed_form() {
    let h = ring_hw(4, 5e-6, 1e11);
    let s = (1u64 << 30) as f64;
    let c = collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Ring, &[0, 1, 2, 3], s, &h).unwrap();
    let oracle = 6.0 * (5e-6 + s / 4.0 / 1e11) * 1e9;
    assert!((c.ns - oracle).abs() < 1e-3);
    assert!((c.ns / 1e6 - 16.136).abs() < 1e-3);
}

#[test]
fn tree_all_reduce_closed_form() {
    let h = ring_hw(8, 5e-6, 1e11);
    let s = (1u64 << 20) as f64;
    let g: Vec<u32> = (0..8).collect();
    let c = collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Tree, &g, s, &h).unwrap();
    assert!((c.ns / 1e3 - 92.9).abs() < 0.1, "{}", c.ns);
}

#[test]
fn single_rank_collectives_are_free() {
    let h = ring_hw(4, 5e-6, 1e11);
    for k in [CollectiveKind::AllReduce, CollectiveKind::AllGather, CollectiveKind::ReduceScatter, CollectiveKind::AllToAll] {
        assert_eq!(collective_time(k, CollectiveAlgo::Ring, &[2], 1e9, &h).unwrap().ns, 0.0);
    }
}

#[test]
fn all_gather_plus_reduce_scatter_is_all_reduce() {
    let h = ring_hw(8, 3e-6, 5e10);
    for p in 2..=8u32 {
        let g: Vec<u32> = (0..p).collect();
        let s = 12345678.0;
        let ar = collective_time(CollectiveKind::AllReduce, CollectiveAlgo::Ring, &g, s, &h).unwrap().ns;
        let ag = collective_time(CollectiveKind::AllGather, CollectiveAlgo::Ring, &g, s, &h).unwrap().ns;
        let rs = collective_time(CollectiveKind::ReduceScatter, CollectiveAlgo::Ring, &g, s, &h).unwrap().ns;
        assert_eq!(ar, ag + rs);
    }
}

#[test]
fn link_calibration_recovers_parameters() {
    let samples: Vec<LinkSample> = [(2, 1e6), (4, 1e7), (8, 1e8), (8, 1e5)]
        .iter()
        .map(|&(p, s)| LinkSample {
            p,
            bytes: s,
            seconds: closed_form(CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring, p, s, 5e-6, 1e11),
        })
        .collect();
    let f = calibrate_links(&samples, CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring).unwrap();
    assert!((f.alpha / 5e-6 - 1.0).abs() < 0.01);
    assert!((f.bandwidth / 1e11 - 1.0).abs() < 0.01);
    let mut noisy = samples.clone();
    noisy[1].seconds *= 1.05;
    let g = calibrate_links(&noisy, CollectiveKind::AllReduce, CollectiveAlgo::Ring, TierKind::Ring).unwrap();
    assert!(g.rms_residual > 0.0);
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> u64 {
    let e = rng.random_range(lo as f64..hi as f64);
    (2f64.powf(e).round() as u64).max(1)
}

/// Random matmul, rmsnorm and attention nodes priced by the roofline oracle.
pub fn synthetic_nodes(count: usize, seed: u64) -> Vec<(OpNode, Vec<TensorMeta>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Precision::Bf16;
    (0..count)
        .map(|i| match i % 3 {
            0 => matmul(log_uniform(&mut rng, 4, 14), log_uniform(&mut rng, 6, 14), log_uniform(&mut rng, 6, 14), p),
            1 => {
                let (t, h) = (log_uniform(&mut rng, 4, 15), log_uniform(&mut rng, 6, 14));
                node(OpKind::RmsNorm, &[act(&[t, h], p), act(&[h], p)], act(&[t, h], p))
            }
            _ => {
                let b = log_uniform(&mut rng, 0, 4);
                let s = log_uniform(&mut rng, 6, 13);
                let heads = 1u64 << rng.random_range(2..6);
                let hd = 64 * rng.random_range(1..3u64);
                let q = act(&[b, s, heads * hd], p);
                let (mut n, ins) = node(OpKind::Attention, &[q.clone(), q.clone(), q.clone()], q);
                n.set_attr(attr::HEADS, heads);
                n.set_attr(attr::HEAD_DIM, hd);
                n.set_attr(attr::CAUSAL, true);
                (n, ins)
            }
        })
        .collect()
}

#[test]
fn predictor_fits_roofline_oracle() {
    let mut h = hw();
    h.launch_overhead = 2e-6;
    let nodes = synthetic_nodes(1500, 7);
    let (recs, _) = roofline_records(&h, &nodes).unwrap();
    let db = ProfileDb::from_records(recs).unwrap();
    let (p, skipped) = Predictor::train(&db, &h.device_id, &ForestParams::default()).unwrap();
    assert!(skipped.is_empty());
    for (k, m) in &p.models {
        println!("{k}: {} records, held-out MAE {:.2}%", m.samples, m.holdout_mae_pct);
        assert!(m.holdout_mae_pct <= 5.0);
    }
}

#[test]
fn stack_dispatch_order() {
    let h = hw();
    let seen = matmul(128, 128, 128, Precision::Bf16);
    let unseen = matmul(256, 128, 128, Precision::Bf16);
    let refs = |n: &(OpNode, Vec<TensorMeta>)| -> Vec<TensorMeta> { n.1.clone() };
    let mut nodes = synthetic_nodes(300, 1);
    nodes.retain(|n| n.0.kind == OpKind::Matmul);
    nodes.push(seen.clone());
    let (mut recs, _) = roofline_records(&h, &nodes).unwrap();
    for r in &mut recs {
        r.latency_ns_mean *= 2.0;
    }
    let db = ProfileDb::from_records(recs).unwrap();
    let (pred, _) = Predictor::train(&db, &h.device_id, &ForestParams::default()).unwrap();
    let mut stack = EngineStack::analytical(h.clone())
        .with_order(parse_order("profile,predict,analytical").unwrap());
    stack.profile = Some(db);
    stack.predictor = Some(pred);

    let ins = refs(&seen);
    let r: Vec<&TensorMeta> = ins.iter().collect();
    let c = stack.price_node(&seen.0, &r, &[]).unwrap();
    assert_eq!(c.engine, EngineKind::Profile);
    assert_eq!(c.ns, 2.0 * price(&seen, &h));

    let ins = refs(&unseen);
    let r: Vec<&TensorMeta> = ins.iter().collect();
    assert_eq!(stack.price_node(&unseen.0, &r, &[]).unwrap().engine, EngineKind::Prediction);

    let x = act(&[64, 64], Precision::Bf16);
    let (sm, ins) = node(OpKind::Softmax, &[x.clone()], x);
    let r: Vec<&TensorMeta> = ins.iter().collect();
    let c = stack.price_node(&sm, &r, &[]).unwrap();
    assert_eq!(c.engine, EngineKind::Analytical);
    assert_eq!(c.ns, roofline_time(&sm, &r, &h).unwrap());
}

#[test]
fn prediction_on_training_point_is_close() {
    let h = hw();
    let nodes: Vec<_> = synthetic_nodes(600, 3).into_iter().filter(|n| n.0.kind == OpKind::Matmul).collect();
    let (recs, _) = roofline_records(&h, &nodes).unwrap();
    let db = ProfileDb::from_records(recs).unwrap();
    let m = train_kind(&db, &h.device_id, &OpKind::Matmul, &ForestParams::default()).unwrap();
    let (p, _) = Predictor::train(&db, &h.device_id, &ForestParams::default()).unwrap();
    assert_eq!(p.models[&OpKind::Matmul], m);
    let probe = &nodes[0];
    let r: Vec<&TensorMeta> = probe.1.iter().collect();
    let got = p.predict(&probe.0, &r, Precision::Bf16).unwrap();
    assert!(got > 0.0);
    assert!((got / price(probe, &h) - 1.0).abs() < 0.1);
}

#[test]
fn duplicate_sweep_entries_are_dropped() {
    let h = hw();
    let mut nodes: Vec<_> = (1..=10).map(|i| matmul(64 * i, 64, 64, Precision::Bf16)).collect();
    nodes.push(nodes[3].clone());
    let (recs, dups) = roofline_records(&h, &nodes).unwrap();
    assert_eq!((recs.len(), dups), (10, 1));
    for (r, n) in recs.iter().zip(&nodes) {
        assert_eq!(r.latency_ns_mean, price(n, &h));
    }
}
