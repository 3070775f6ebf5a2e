use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::forest::{shuffled, Forest, ForestParams};
use super::profile::{parse_signature, ProfileDb, ProfileRecord};
use crate::graph::cost::{batched_matmul_dims, matmul_dims};
use crate::graph::{op_bytes, op_flops, OpKind, OpNode, Phase, Precision, TensorMeta, TensorRef, TensorRole};
use crate::{Error, Result};

/// Records needed before a kind can be trained.
pub const MIN_RECORDS: usize = 50;
const SHAPE_SLOTS: usize = 3;
const DIMS: usize = 4;
pub const FEATURES: usize = SHAPE_SLOTS * DIMS + 4;

fn lg(x: f64) -> f64 {
    libm::log2(x.max(1.0))
}

/// Fixed-length features: log2 of up to three input shapes (each padded to
/// four dims, leading dims folded), precision code, log2 FLOPs, log2 bytes
/// and log2 arithmetic intensity.
pub fn features(n: &OpNode, inputs: &[&TensorMeta], precision: Precision) -> [f64; FEATURES] {
    let mut f = [0.0; FEATURES];
    for (s, t) in inputs.iter().take(SHAPE_SLOTS).enumerate() {
        let sh = &t.shape;
        let mut dims = [1u64; DIMS];
        let take = sh.len().min(DIMS);
        for j in 0..take {
            dims[DIMS - take + j] = sh[sh.len() - take + j];
        }
        if sh.len() > DIMS {
            dims[0] = sh[..sh.len() - DIMS + 1].iter().product();
        }
        for j in 0..DIMS {
            f[s * DIMS + j] = lg(dims[j] as f64);
        }
    }
    let flops = op_flops(n, inputs) as f64;
    let bytes = op_bytes(n, inputs) as f64;
    let b = SHAPE_SLOTS * DIMS;
    f[b] = precision.code();
    f[b + 1] = lg(flops);
    f[b + 2] = lg(bytes);
    f[b + 3] = lg(flops + 1.0) - lg(bytes + 1.0);
    f
}

/// Rebuilds a node of `kind` from a profile record so that its features can
/// be computed. Outputs follow the usual shape rules of the kind.
pub fn node_from_record(r: &ProfileRecord) -> Result<(OpNode, Vec<TensorMeta>)> {
    let (shapes, attrs) = parse_signature(&r.shape_signature)?;
    let inputs: Vec<TensorMeta> = shapes.into_iter().map(|s| TensorMeta::new(s, r.precision, TensorRole::Activation)).collect();
    let mut n = OpNode::new("profiled", r.op_kind.clone(), Phase::Forward);
    n.attrs = attrs;
    n.inputs = (0..inputs.len()).map(|i| TensorRef::input(format!("in{i}"))).collect();
    let out_shape = match (&r.op_kind, inputs.as_slice()) {
        (OpKind::Matmul, [a, b, ..]) => matmul_dims(&n, a, b).map(|(_, s)| s),
        (OpKind::BatchedMatmul, [a, b, ..]) => batched_matmul_dims(&n, a, b).map(|(_, s)| s),
        (_, [a, ..]) => Some(a.shape.clone()),
        _ => None,
    };
    if let Some(s) = out_shape {
        n.outputs.push(TensorMeta::new(s, r.precision, TensorRole::Activation));
    }
    Ok((n, inputs))
}

/// Per-kind model, fitted on log2 latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindModel {
    forest: Option<Forest>,
    /// Set when every training latency was identical.
    constant: Option<f64>,
    pub samples: usize,
    /// Mean relative error on the held-out fifth, in percent.
    pub holdout_mae_pct: f64,
}

impl KindModel {
    fn predict(&self, x: &[f64]) -> f64 {
        match (&self.constant, &self.forest) {
            (Some(c), _) => *c,
            (None, Some(f)) => libm::exp2(f.predict(x)),
            (None, None) => unreachable!(),
        }
    }
}

/// Latency predictors for one device, keyed by op kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub device_id: String,
    pub models: BTreeMap<OpKind, KindModel>,
}

fn fit(xs: &[Vec<f64>], ys: &[f64], params: &ForestParams) -> KindModel {
    if ys.iter().all(|y| *y == ys[0]) {
        return KindModel { forest: None, constant: Some(ys[0]), samples: ys.len(), holdout_mae_pct: 0.0 };
    }
    let logs: Vec<f64> = ys.iter().map(|y| libm::log2(*y)).collect();
    KindModel { forest: Some(Forest::fit(xs, &logs, params)), constant: None, samples: ys.len(), holdout_mae_pct: 0.0 }
}

/// Trains the model for one kind on the records of `device_id`: fits on a
/// seeded 80% split, measures relative error on the rest, then keeps the
/// held-out fit.
pub fn train_kind(db: &ProfileDb, device_id: &str, kind: &OpKind, params: &ForestParams) -> Result<KindModel> {
    let recs: Vec<ProfileRecord> = db.records().filter(|r| &r.op_kind == kind && r.device_id == device_id).collect();
    if recs.len() < MIN_RECORDS {
        return Err(Error::Training(format!("{kind} on {device_id}: {} records, need at least {MIN_RECORDS}", recs.len())));
    }
    let mut xs = Vec::with_capacity(recs.len());
    let mut ys = Vec::with_capacity(recs.len());
    for r in &recs {
        let (n, ins) = node_from_record(r)?;
        let refs: Vec<&TensorMeta> = ins.iter().collect();
        xs.push(features(&n, &refs, r.precision).to_vec());
        ys.push(r.latency_ns_mean);
    }
    let order = shuffled(recs.len(), params.seed);
    let cut = recs.len() * 4 / 5;
    let (train, test) = order.split_at(cut);
    let tx: Vec<Vec<f64>> = train.iter().map(|&i| xs[i].clone()).collect();
    let ty: Vec<f64> = train.iter().map(|&i| ys[i]).collect();
    let mut m = fit(&tx, &ty, params);
    let err: f64 = test.iter().map(|&i| libm::fabs(m.predict(&xs[i]) - ys[i]) / ys[i]).sum();
    m.holdout_mae_pct = 100.0 * err / test.len().max(1) as f64;
    m.samples = recs.len();
    Ok(m)
}

impl Predictor {
    /// Trains every kind of `device_id` with enough records; kinds below the
    /// threshold are returned as skipped.
    pub fn train(db: &ProfileDb, device_id: &str, params: &ForestParams) -> Result<(Predictor, Vec<OpKind>)> {
        let mut kinds: BTreeMap<OpKind, usize> = BTreeMap::new();
        for r in db.records().filter(|r| r.device_id == device_id) {
            *kinds.entry(r.op_kind).or_default() += 1;
        }
        let mut p = Predictor { device_id: device_id.into(), models: BTreeMap::new() };
        let mut skipped = Vec::new();
        for (k, count) in kinds {
            if count < MIN_RECORDS {
                skipped.push(k);
                continue;
            }
            let m = train_kind(db, device_id, &k, params)?;
            p.models.insert(k, m);
        }
        Ok((p, skipped))
    }

    pub fn supports(&self, kind: &OpKind) -> bool {
        self.models.contains_key(kind)
    }

    /// Predicted latency in ns, or `None` for an untrained kind.
    pub fn predict(&self, n: &OpNode, inputs: &[&TensorMeta], precision: Precision) -> Option<f64> {
        self.models.get(&n.kind).map(|m| m.predict(&features(n, inputs, precision)))
    }
}
