//! Per-node FLOP and byte counts, computed from input shapes.

use alloc::vec::Vec;

use super::{attr, EltwiseOp, OpKind, OpNode, TensorMeta};

/// Attention attribute that disables causal halving of the FLOP count.
pub const CAUSAL_FULL_ATTR: &str = "count_full";

/// `(rows, cols)` of a tensor viewed as a matrix (leading dims flattened).
pub(crate) fn view2d(shape: &[u64]) -> (u64, u64) {
    match shape.split_last() {
        Some((&last, lead)) => (lead.iter().product(), last),
        None => (1, 1),
    }
}

/// `(m, k, n)` of `op(a) @ op(b)` plus the expected output shape.
pub(crate) fn matmul_dims(node: &OpNode, a: &TensorMeta, b: &TensorMeta) -> Option<((u64, u64, u64), Vec<u64>)> {
    let ta = node.attr_bool(attr::TRANSPOSE_A);
    let tb = node.attr_bool(attr::TRANSPOSE_B);
    let (ra, ca) = view2d(&a.shape);
    let (rb, cb) = view2d(&b.shape);
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    if k != k2 {
        return None;
    }
    let mut out: Vec<u64> = if ta || a.shape.len() < 2 { alloc::vec![m] } else { a.shape[..a.shape.len() - 1].to_vec() };
    out.push(n);
    Some(((m, k, n), out))
}

pub(crate) fn batched_matmul_dims(node: &OpNode, a: &TensorMeta, b: &TensorMeta) -> Option<((u64, u64, u64, u64), Vec<u64>)> {
    if a.shape.len() < 3 || b.shape.len() < 3 {
        return None;
    }
    let la = a.shape.len();
    let lb = b.shape.len();
    let batch: u64 = a.shape[..la - 2].iter().product();
    let batch_b: u64 = b.shape[..lb - 2].iter().product();
    if batch != batch_b {
        return None;
    }
    let (ra, ca) = (a.shape[la - 2], a.shape[la - 1]);
    let (rb, cb) = (b.shape[lb - 2], b.shape[lb - 1]);
    let (m, k) = if node.attr_bool(attr::TRANSPOSE_A) { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if node.attr_bool(attr::TRANSPOSE_B) { (cb, rb) } else { (rb, cb) };
    if k != k2 {
        return None;
    }
    let mut out = a.shape[..la - 2].to_vec();
    out.push(m);
    out.push(n);
    Some(((batch, m, k, n), out))
}

/// Key/value sequence length of an attention node: the sum over its key inputs.
pub(crate) fn attention_kv_len(node: &OpNode, inputs: &[&TensorMeta]) -> u64 {
    // Backward nodes carry the output gradient as a trailing extra input.
    let kv = if node.attr_bool(attr::BACKWARD) { &inputs[..inputs.len().saturating_sub(1)] } else { inputs };
    kv.iter().skip(1).step_by(2).filter_map(|k| k.shape.get(1)).sum()
}

fn attention_flops(node: &OpNode, inputs: &[&TensorMeta]) -> u64 {
    let Some(q) = inputs.first() else { return 0 };
    if q.shape.len() < 2 {
        return 0;
    }
    let batch = q.shape[0];
    let sq = q.shape[1];
    let heads = node.attr_u64(attr::HEADS).unwrap_or(1);
    let head_dim = node.attr_u64(attr::HEAD_DIM).unwrap_or(q.shape[q.shape.len() - 1] / heads.max(1));
    let skv = attention_kv_len(node, inputs);
    let bhd = batch * heads * head_dim;
    // Two matmuls (scores and values), 2 FLOPs per multiply-add each.
    let fwd = if node.attr_bool(attr::CAUSAL) && !node.attr_bool(CAUSAL_FULL_ATTR) && skv >= sq {
        4 * bhd * sq * (skv - sq) + 2 * bhd * sq * sq
    } else {
        4 * bhd * sq * skv
    };
    if node.attr_bool(attr::BACKWARD) {
        fwd * 5 / 2
    } else {
        fwd
    }
}

/// FLOPs of one node given its resolved input metadata.
pub fn op_flops(node: &OpNode, inputs: &[&TensorMeta]) -> u64 {
    let bwd = node.attr_bool(attr::BACKWARD);
    let first_numel = inputs.first().map(|t| t.numel()).unwrap_or(0);
    match &node.kind {
        OpKind::Matmul => match inputs {
            [a, b, ..] => matmul_dims(node, a, b).map(|((m, k, n), _)| 2 * m * k * n).unwrap_or(0),
            _ => 0,
        },
        OpKind::BatchedMatmul => match inputs {
            [a, b, ..] => batched_matmul_dims(node, a, b).map(|((bt, m, k, n), _)| 2 * bt * m * k * n).unwrap_or(0),
            _ => 0,
        },
        OpKind::Attention => attention_flops(node, inputs),
        OpKind::Softmax => first_numel * if bwd { 4 } else { 5 },
        OpKind::RmsNorm => first_numel * if bwd { 6 } else { 4 },
        OpKind::LayerNorm => first_numel * if bwd { 9 } else { 7 },
        OpKind::Elementwise(op) => {
            let rate = if bwd && matches!(op, EltwiseOp::Silu | EltwiseOp::Gelu) { op.rate() + 1 } else { op.rate() };
            let elems: u64 = if node.attr_bool(attr::REDUCE) {
                inputs.iter().map(|t| t.numel()).sum()
            } else {
                node.outputs.iter().map(|t| t.numel()).sum()
            };
            rate * elems
        }
        OpKind::EmbeddingLookup => {
            if bwd {
                inputs.get(1).map(|t| t.numel()).unwrap_or(0)
            } else {
                0
            }
        }
        OpKind::RouterTopk => first_numel,
        OpKind::Fused(_) => node.attr_u64(attr::FLOPS).unwrap_or(0),
        OpKind::AllReduce
        | OpKind::AllGather
        | OpKind::ReduceScatter
        | OpKind::AllToAll
        | OpKind::Send
        | OpKind::Recv
        | OpKind::Noop => 0,
    }
}

/// Bytes moved by a communication node.
pub fn comm_payload_bytes(node: &OpNode, inputs: &[&TensorMeta]) -> u64 {
    if let Some(b) = node.attr_u64(attr::PAYLOAD_BYTES) {
        return b;
    }
    let ins: u64 = inputs.iter().map(|t| t.bytes()).sum();
    let outs: u64 = node.outputs.iter().map(|t| t.bytes()).sum();
    match node.kind {
        OpKind::AllGather | OpKind::Recv => outs,
        _ => ins,
    }
}

/// Memory traffic of one node: external inputs plus outputs. Communication
/// nodes report their payload; no-ops move nothing.
pub fn op_bytes(node: &OpNode, inputs: &[&TensorMeta]) -> u64 {
    match node.kind {
        OpKind::Noop => 0,
        ref k if k.is_comm() => comm_payload_bytes(node, inputs),
        _ => inputs.iter().map(|t| t.bytes()).sum::<u64>() + node.outputs.iter().map(|t| t.bytes()).sum::<u64>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Phase, Precision, TensorRole, TensorRef};

    fn t(shape: &[u64], p: Precision) -> TensorMeta {
        TensorMeta::new(shape.to_vec(), p, TensorRole::Activation)
    }

    #[test]
    fn matmul_4096_cubed_bf16() {
        let a = t(&[4096, 4096], Precision::Bf16);
        let b = t(&[4096, 4096], Precision::Bf16);
        let n = OpNode::new("mm", OpKind::Matmul, Phase::Forward)
            .with_inputs([TensorRef::input("a"), TensorRef::input("b")])
            .with_output(t(&[4096, 4096], Precision::Bf16));
        assert_eq!(op_flops(&n, &[&a, &b]), 137_438_953_472);
        assert_eq!(op_bytes(&n, &[&a, &b]), 100_663_296);
    }

    #[test]
    fn elementwise_add_million_fp32() {
        let a = t(&[1_000_000], Precision::Fp32);
        let n = OpNode::new("add", OpKind::Elementwise(EltwiseOp::Add), Phase::Forward)
            .with_inputs([TensorRef::input("a"), TensorRef::input("b")])
            .with_output(a.clone());
        assert_eq!(op_flops(&n, &[&a, &a]), 1_000_000);
        assert_eq!(op_bytes(&n, &[&a, &a]), 12_000_000);
    }

    #[test]
    fn noop_is_free() {
        let a = t(&[8, 8], Precision::Fp32);
        let n = OpNode::new("v", OpKind::Noop, Phase::Forward).with_inputs([TensorRef::input("a")]).with_output(a.clone());
        assert_eq!(op_flops(&n, &[&a]), 0);
        assert_eq!(op_bytes(&n, &[&a]), 0);
    }

    #[test]
    fn causal_attention_counts_half_the_square() {
        let q = t(&[2, 16, 32], Precision::Bf16);
        let base = OpNode::new("attn", OpKind::Attention, Phase::Forward)
            .with_attr(attr::HEADS, 4i64)
            .with_attr(attr::HEAD_DIM, 8i64)
            .with_output(q.clone());
        let full = op_flops(&base, &[&q, &q, &q]);
        assert_eq!(full, 4 * 2 * 4 * 8 * 16 * 16);
        let causal = base.clone().with_attr(attr::CAUSAL, true);
        assert_eq!(op_flops(&causal, &[&q, &q, &q]) * 2, full);
        let forced = causal.with_attr(CAUSAL_FULL_ATTR, true);
        assert_eq!(op_flops(&forced, &[&q, &q, &q]), full);
    }

    #[test]
    fn communication_has_no_flops_and_payload_bytes() {
        let a = t(&[4, 8], Precision::Bf16);
        let n = OpNode::new("ar", OpKind::AllReduce, Phase::Forward).with_inputs([TensorRef::input("a")]).with_output(a.clone());
        assert_eq!(op_flops(&n, &[&a]), 0);
        assert_eq!(op_bytes(&n, &[&a]), 64);
    }
}
