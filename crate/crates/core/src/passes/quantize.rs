use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::graph::{OpKind, OperatorGraph, Precision, TensorMeta, TensorRole};
use crate::{Error, Result};

/// Key of a precision map entry: `all`, a tensor role, or an op kind (which
/// applies to that kind's outputs).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    All,
    Role(TensorRole),
    Kind(OpKind),
}

fn parse_key(s: &str) -> Result<Key> {
    if s == "all" {
        return Ok(Key::All);
    }
    if let Ok(r) = s.parse::<TensorRole>() {
        return Ok(Key::Role(r));
    }
    s.parse::<OpKind>()
        .map(Key::Kind)
        .map_err(|_| Error::config(format!("unknown quantization key `{s}` (expected `all`, a tensor role or an op kind)")))
}

/// Retags tensor precisions. Kind entries take precedence over role entries,
/// which take precedence over `all`. Returns the graph and the number of
/// tensors whose precision changed.
pub fn quantize(g: &OperatorGraph, map: &BTreeMap<String, Precision>) -> Result<(OperatorGraph, usize)> {
    let mut parsed = BTreeMap::new();
    for (k, p) in map {
        parsed.insert(parse_key(k)?, *p);
    }
    let pick = |kind: Option<&OpKind>, m: &TensorMeta| -> Option<Precision> {
        kind.and_then(|k| parsed.get(&Key::Kind(k.clone())))
            .or_else(|| parsed.get(&Key::Role(m.role)))
            .or_else(|| parsed.get(&Key::All))
            .copied()
    };
    let mut out = g.clone();
    let mut changed = 0;
    for i in &mut out.inputs {
        if let Some(p) = pick(None, &i.meta) {
            changed += usize::from(i.meta.dtype != p);
            i.meta.dtype = p;
        }
    }
    for n in &mut out.nodes {
        for m in &mut n.outputs {
            if let Some(p) = pick(Some(&n.kind), m) {
                changed += usize::from(m.dtype != p);
                m.dtype = p;
            }
        }
    }
    out.validate()?;
    Ok((out, changed))
}
