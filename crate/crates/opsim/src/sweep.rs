//! Operator shape sweeps for synthetic profile databases.
//!
//! ```toml
//! [[op]]
//! kind = "matmul"
//! m = 4096
//! k = 4096
//! n = 4096
//!
//! [[op]]
//! kind = "attention"
//! batch = 1
//! seq = 2048
//! heads = 32
//! head_dim = 128
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use opsim_core::graph::{attr, OpKind, OpNode, Phase, Precision, TensorMeta, TensorRef, TensorRole};

use crate::format::read_text;
use crate::{Error, Result};

fn bf16() -> Precision {
    Precision::Bf16
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SweepOp {
    Matmul {
        m: u64,
        k: u64,
        n: u64,
        #[serde(default = "bf16")]
        precision: Precision,
    },
    Rmsnorm {
        tokens: u64,
        hidden: u64,
        #[serde(default = "bf16")]
        precision: Precision,
    },
    Attention {
        batch: u64,
        seq: u64,
        heads: u64,
        head_dim: u64,
        #[serde(default = "yes")]
        causal: bool,
        #[serde(default = "bf16")]
        precision: Precision,
    },
    /// `op` is one of add, mul, silu, gelu.
    Elementwise {
        op: String,
        numel: u64,
        #[serde(default = "bf16")]
        precision: Precision,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    #[serde(default)]
    op: Vec<SweepOp>,
}

pub fn load_sweep(path: &Path) -> Result<Vec<SweepOp>> {
    let f: SweepFile = toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))?;
    Ok(f.op)
}

fn act(shape: &[u64], p: Precision) -> TensorMeta {
    TensorMeta::new(shape.to_vec(), p, TensorRole::Activation)
}

fn node(kind: OpKind, ins: Vec<TensorMeta>, out: TensorMeta) -> (OpNode, Vec<TensorMeta>) {
    let n = OpNode::new("n", kind, Phase::Forward).with_inputs((0..ins.len()).map(|i| TensorRef::input(format!("i{i}")))).with_output(out);
    (n, ins)
}

impl SweepOp {
    /// A standalone node with its input metadata.
    pub fn node(&self) -> Result<(OpNode, Vec<TensorMeta>)> {
        Ok(match *self {
            SweepOp::Matmul { m, k, n, precision: p } => node(OpKind::Matmul, vec![act(&[m, k], p), act(&[k, n], p)], act(&[m, n], p)),
            SweepOp::Rmsnorm { tokens, hidden, precision: p } => node(OpKind::RmsNorm, vec![act(&[tokens, hidden], p), act(&[hidden], p)], act(&[tokens, hidden], p)),
            SweepOp::Attention { batch, seq, heads, head_dim, causal, precision: p } => {
                let q = act(&[batch, seq, heads * head_dim], p);
                let (mut n, ins) = node(OpKind::Attention, vec![q.clone(), q.clone(), q.clone()], q);
                n.set_attr(attr::HEADS, heads);
                n.set_attr(attr::HEAD_DIM, head_dim);
                n.set_attr(attr::CAUSAL, causal);
                (n, ins)
            }
            SweepOp::Elementwise { ref op, numel, precision: p } => {
                let kind: OpKind = format!("elementwise.{op}").parse()?;
                let x = act(&[numel], p);
                let arity = if matches!(op.as_str(), "add" | "mul") { 2 } else { 1 };
                node(kind, vec![x.clone(); arity], x)
            }
        })
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> u64 {
    let e = rng.random_range(lo as f64..hi as f64);
    (2f64.powf(e).round() as u64).max(1)
}

/// `count` random matmul, rmsnorm and attention shapes in rotation,
/// log-uniform in size.
pub fn random_sweep(count: usize, seed: u64) -> Vec<SweepOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let precision = Precision::Bf16;
    (0..count)
        .map(|i| match i % 3 {
            0 => SweepOp::Matmul { m: log_uniform(&mut rng, 4, 14), k: log_uniform(&mut rng, 6, 14), n: log_uniform(&mut rng, 6, 14), precision },
            1 => SweepOp::Rmsnorm { tokens: log_uniform(&mut rng, 4, 15), hidden: log_uniform(&mut rng, 6, 14), precision },
            _ => SweepOp::Attention {
                batch: log_uniform(&mut rng, 0, 4),
                seq: log_uniform(&mut rng, 6, 13),
                heads: 1 << rng.random_range(2..6),
                head_dim: 64 * rng.random_range(1..3u64),
                causal: true,
                precision,
            },
        })
        .collect()
}
