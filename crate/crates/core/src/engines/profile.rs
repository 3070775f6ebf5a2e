use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use super::roofline::node_precision;
use crate::graph::{attr, AttrValue, OpKind, OpNode, Precision, TensorMeta};
use crate::{Error, Result};

/// Attributes that change an operator's cost and so belong in its key.
pub const PRICING_ATTRS: &[&str] = &[
    attr::BACKWARD,
    attr::CAUSAL,
    crate::graph::CAUSAL_FULL_ATTR,
    attr::FLOPS,
    attr::GROUP_SIZE,
    attr::HEADS,
    attr::HEAD_DIM,
    attr::KV_HEADS,
    attr::PAYLOAD_BYTES,
    attr::REDUCE,
    attr::TRANSPOSE_A,
    attr::TRANSPOSE_B,
];

fn render_attr(out: &mut String, v: &AttrValue) {
    let _ = match v {
        AttrValue::Bool(b) => write!(out, "{b}"),
        AttrValue::Int(i) => write!(out, "{i}"),
        AttrValue::Float(f) => write!(out, "{f}"),
        AttrValue::Str(s) => write!(out, "{s}"),
        AttrValue::Ints(v) => {
            for (i, x) in v.iter().enumerate() {
                let _ = write!(out, "{}{x}", if i > 0 { "x" } else { "" });
            }
            Ok(())
        }
    };
}

/// Canonical key text for a node's shapes and pricing attributes, e.g.
/// `4096x4096;4096x4096|transpose_b=true`. Attributes set to `false` are
/// dropped so that absent and false agree.
pub fn shape_signature(n: &OpNode, inputs: &[&TensorMeta]) -> String {
    let mut s = String::new();
    for (i, t) in inputs.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        for (j, d) in t.shape.iter().enumerate() {
            let _ = write!(s, "{}{d}", if j > 0 { "x" } else { "" });
        }
    }
    let mut first = true;
    for (k, v) in &n.attrs {
        if !PRICING_ATTRS.contains(&k.as_str()) || *v == AttrValue::Bool(false) {
            continue;
        }
        s.push(if first { '|' } else { ';' });
        first = false;
        s.push_str(k);
        s.push('=');
        render_attr(&mut s, v);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProfileKey {
    pub device_id: String,
    pub op_kind: OpKind,
    pub shape_signature: String,
    pub precision: Precision,
}

impl ProfileKey {
    pub fn of(device_id: &str, n: &OpNode, inputs: &[&TensorMeta]) -> Self {
        ProfileKey {
            device_id: device_id.to_string(),
            op_kind: n.kind.clone(),
            shape_signature: shape_signature(n, inputs),
            precision: node_precision(n, inputs),
        }
    }
}

/// One row of the profile database file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub device_id: String,
    pub op_kind: OpKind,
    pub shape_signature: String,
    pub precision: Precision,
    pub latency_ns_mean: f64,
    pub samples: u64,
}

impl ProfileRecord {
    pub fn key(&self) -> ProfileKey {
        ProfileKey {
            device_id: self.device_id.clone(),
            op_kind: self.op_kind.clone(),
            shape_signature: self.shape_signature.clone(),
            precision: self.precision,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ns: f64,
    pub samples: u64,
}

/// Exact-key latency store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProfileDb {
    entries: BTreeMap<ProfileKey, LatencyStats>,
}

impl ProfileDb {
    /// Builds a database, rejecting duplicate keys and non-positive means.
    pub fn from_records(records: impl IntoIterator<Item = ProfileRecord>) -> Result<Self> {
        let mut db = ProfileDb::default();
        for r in records {
            db.insert(r)?;
        }
        Ok(db)
    }

    pub fn insert(&mut self, r: ProfileRecord) -> Result<()> {
        if !(r.latency_ns_mean > 0.0 && r.latency_ns_mean.is_finite()) {
            return Err(Error::config(format!("record {} {}: latency must be positive", r.op_kind, r.shape_signature)));
        }
        let key = r.key();
        if self.entries.contains_key(&key) {
            return Err(Error::config(format!(
                "duplicate profile record for {} {} {} on {}",
                key.op_kind, key.shape_signature, key.precision, key.device_id
            )));
        }
        self.entries.insert(key, LatencyStats { mean_ns: r.latency_ns_mean, samples: r.samples });
        Ok(())
    }

    pub fn lookup(&self, key: &ProfileKey) -> Option<f64> {
        self.entries.get(key).map(|s| s.mean_ns)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_kind(&self, kind: &OpKind) -> bool {
        self.entries.keys().any(|k| &k.op_kind == kind)
    }

    pub fn records(&self) -> impl Iterator<Item = ProfileRecord> + '_ {
        self.entries.iter().map(|(k, s)| ProfileRecord {
            device_id: k.device_id.clone(),
            op_kind: k.op_kind.clone(),
            shape_signature: k.shape_signature.clone(),
            precision: k.precision,
            latency_ns_mean: s.mean_ns,
            samples: s.samples,
        })
    }
}

/// Parses a signature back into input shapes and attributes.
pub fn parse_signature(sig: &str) -> Result<(Vec<Vec<u64>>, BTreeMap<String, AttrValue>)> {
    let bad = || Error::config(format!("malformed shape signature `{sig}`"));
    let (shapes, attrs) = sig.split_once('|').unwrap_or((sig, ""));
    let mut out = Vec::new();
    if !shapes.is_empty() {
        for t in shapes.split(';') {
            let dims = if t.is_empty() {
                Vec::new()
            } else {
                t.split('x').map(|d| d.parse::<u64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
            };
            out.push(dims);
        }
    }
    let mut map = BTreeMap::new();
    if !attrs.is_empty() {
        for kv in attrs.split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            let v = if v == "true" {
                AttrValue::Bool(true)
            } else if let Ok(i) = v.parse::<i64>() {
                AttrValue::Int(i)
            } else if let Ok(f) = v.parse::<f64>() {
                AttrValue::Float(f)
            } else {
                AttrValue::Str(v.to_string())
            };
            map.insert(k.to_string(), v);
        }
    }
    Ok((out, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Phase, TensorRef, TensorRole};

    fn mm() -> (OpNode, TensorMeta, TensorMeta) {
        let a = TensorMeta::new([128, 256], Precision::Bf16, TensorRole::Activation);
        let b = TensorMeta::new([512, 256], Precision::Bf16, TensorRole::Weight);
        let n = OpNode::new("mm", OpKind::Matmul, Phase::Forward)
            .with_inputs([TensorRef::input("a"), TensorRef::input("b")])
            .with_attr(attr::TRANSPOSE_B, true)
            .with_attr(attr::SHARD, "col")
            .with_output(TensorMeta::new([128, 512], Precision::Bf16, TensorRole::Activation));
        (n, a, b)
    }

    #[test]
    fn signature_is_canonical() {
        let (n, a, b) = mm();
        assert_eq!(shape_signature(&n, &[&a, &b]), "128x256;512x256|transpose_b=true");
        let (shapes, attrs) = parse_signature("128x256;512x256|transpose_b=true").unwrap();
        assert_eq!(shapes, [[128, 256], [512, 256]]);
        assert_eq!(attrs[attr::TRANSPOSE_B], AttrValue::Bool(true));
    }

    #[test]
    fn hit_miss_and_duplicates() {
        let (n, a, b) = mm();
        let key = ProfileKey::of("h100", &n, &[&a, &b]);
        let rec = ProfileRecord {
            device_id: "h100".into(),
            op_kind: OpKind::Matmul,
            shape_signature: key.shape_signature.clone(),
            precision: Precision::Bf16,
            latency_ns_mean: 1234.0,
            samples: 10,
        };
        let db = ProfileDb::from_records([rec.clone()]).unwrap();
        assert_eq!(db.lookup(&key), Some(1234.0));
        let mut other = key.clone();
        other.precision = Precision::Fp8;
        assert_eq!(db.lookup(&other), None);
        assert!(ProfileDb::from_records([rec.clone(), rec]).is_err());
    }
}
