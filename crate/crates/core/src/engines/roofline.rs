use crate::graph::{op_bytes, op_flops, OpNode, Precision, TensorMeta};
use crate::units::s_to_ns;
use crate::Result;

use super::HardwareSpec;

/// Precision a node executes in: the widest of its inputs, or its first
/// output when it has none.
pub fn node_precision(n: &OpNode, inputs: &[&TensorMeta]) -> Precision {
    inputs
        .iter()
        .map(|t| t.dtype)
        .reduce(|a, b| if b.bytes() > a.bytes() { b } else { a })
        .or_else(|| n.outputs.first().map(|t| t.dtype))
        .unwrap_or(Precision::Fp32)
}

/// `max(flops / peak, bytes / bandwidth) + launch`, in nanoseconds.
pub fn roofline_time(n: &OpNode, inputs: &[&TensorMeta], hw: &HardwareSpec) -> Result<f64> {
    let flops = op_flops(n, inputs) as f64;
    let bytes = op_bytes(n, inputs) as f64;
    let compute = if flops > 0.0 { flops / hw.peak(node_precision(n, inputs))? } else { 0.0 };
    let memory = bytes / hw.mem_bandwidth;
    Ok(s_to_ns(compute.max(memory) + hw.launch_overhead))
}

/// Roofline time from raw counts.
pub fn roofline_counts(flops: f64, bytes: f64, peak: f64, hw: &HardwareSpec) -> f64 {
    s_to_ns((flops / peak).max(bytes / hw.mem_bandwidth) + hw.launch_overhead)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OpKind, Phase, TensorRef, TensorRole};

    #[test]
    fn noop_costs_launch_only() {
        let mut hw = HardwareSpec::device("t", &[(Precision::Bf16, 1e14)], 2e12);
        hw.launch_overhead = 2e-6;
        let t = TensorMeta::new([64, 64], Precision::Bf16, TensorRole::Activation);
        let n = OpNode::new("v", OpKind::Noop, Phase::Forward).with_inputs([TensorRef::input("x")]).with_output(t.clone());
        assert_eq!(roofline_time(&n, &[&t], &hw).unwrap(), 2000.0);
    }

    #[test]
    fn widest_input_sets_precision() {
        let a = TensorMeta::new([4, 4], Precision::Fp8, TensorRole::Activation);
        let b = TensorMeta::new([4, 4], Precision::Bf16, TensorRole::Weight);
        let n = OpNode::new("mm", OpKind::Matmul, Phase::Forward);
        assert_eq!(node_precision(&n, &[&a, &b]), Precision::Bf16);
        assert_eq!(node_precision(&n, &[&a, &a]), Precision::Fp8);
    }
}
