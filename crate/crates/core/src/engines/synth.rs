use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::profile::{ProfileKey, ProfileRecord};
use super::roofline::roofline_time;
use super::HardwareSpec;
use crate::graph::{OpNode, TensorMeta};
use crate::Result;

/// Profile records whose latency is the roofline time of each node.
/// Repeated keys are kept once; the count of dropped repeats is returned.
pub fn roofline_records(hw: &HardwareSpec, nodes: &[(OpNode, Vec<TensorMeta>)]) -> Result<(Vec<ProfileRecord>, usize)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut dups = 0;
    for (n, ins) in nodes {
        let refs: Vec<&TensorMeta> = ins.iter().collect();
        let key = ProfileKey::of(&hw.device_id, n, &refs);
        if !seen.insert(key.clone()) {
            dups += 1;
            continue;
        }
        let ns = roofline_time(n, &refs, hw)?;
        out.push(ProfileRecord {
            device_id: key.device_id,
            op_kind: key.op_kind,
            shape_signature: key.shape_signature,
            precision: key.precision,
            latency_ns_mean: ns,
            samples: 1,
        });
    }
    Ok((out, dups))
}
