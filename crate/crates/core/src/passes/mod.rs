//! Graph-to-graph transformation pipeline.

mod canonicalize;
mod quantize;
mod recompute;
pub mod rewrite;

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use canonicalize::canonicalize;
pub use quantize::quantize;
pub use recompute::{full_recompute_policy, recompute};
pub use rewrite::{match_replace, Rewrite};

use crate::graph::{derive_backward, OperatorGraph, Precision, TensorRef};
use crate::{Error, Result};

/// Mutation counts of one pass run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: String,
    pub matches: usize,
    pub added: usize,
    pub removed: usize,
}

pub trait Pass: Send + Sync {
    fn name(&self) -> &str;
    /// Transforms `g`; the count is the pass-specific number of matches.
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)>;
}

#[derive(Default)]
pub struct PassPipeline {
    passes: Vec<Box<dyn Pass>>,
}

impl PassPipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, p: impl Pass + 'static) -> Self {
        self.passes.push(Box::new(p));
        self
    }

    pub fn push(&mut self, p: Box<dyn Pass>) {
        self.passes.push(p);
    }

    pub fn from_specs(specs: &[PassSpec]) -> Result<Self> {
        let mut p = PassPipeline::new();
        for s in specs {
            p.push(pass_from_spec(s)?);
        }
        Ok(p)
    }

    pub fn names(&self) -> Vec<&str> {
        self.passes.iter().map(|p| p.name()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    /// Runs every pass in order, validating after each one.
    pub fn run(&self, g: &OperatorGraph) -> Result<(OperatorGraph, Vec<PassReport>)> {
        g.validate()?;
        let mut cur = g.clone();
        let mut reports = Vec::new();
        for p in &self.passes {
            let wrap = |e: Error| Error::Pass { pass: p.name().to_string(), source: Box::new(e) };
            let (next, matches) = p.apply(&cur).map_err(wrap)?;
            next.validate().map_err(wrap)?;
            let before: BTreeSet<&str> = cur.nodes.iter().map(|n| n.id.as_str()).collect();
            let after: BTreeSet<&str> = next.nodes.iter().map(|n| n.id.as_str()).collect();
            reports.push(PassReport {
                pass: p.name().to_string(),
                matches,
                added: after.difference(&before).count(),
                removed: before.difference(&after).count(),
            });
            cur = next;
        }
        Ok((cur, reports))
    }
}

pub struct Canonicalize;

impl Pass for Canonicalize {
    fn name(&self) -> &str {
        "canonicalize"
    }
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
        canonicalize(g)
    }
}

/// Applies each rewrite in turn to a fixpoint.
pub struct Fuse(pub Vec<Rewrite>);

impl Pass for Fuse {
    fn name(&self) -> &str {
        "fuse"
    }
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
        let mut cur = g.clone();
        let mut total = 0;
        for r in &self.0 {
            let (next, n) = match_replace(&cur, r)?;
            cur = next;
            total += n;
        }
        Ok((cur, total))
    }
}

pub struct Quantize(pub BTreeMap<String, Precision>);

impl Pass for Quantize {
    fn name(&self) -> &str {
        "quantize"
    }
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
        quantize(g, &self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecomputePolicy {
    Tensors(Vec<TensorRef>),
    Full,
}

pub struct Recompute(pub RecomputePolicy);

impl Pass for Recompute {
    fn name(&self) -> &str {
        "recompute"
    }
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
        match &self.0 {
            RecomputePolicy::Tensors(t) => recompute(g, t),
            RecomputePolicy::Full => recompute(g, &full_recompute_policy(g)),
        }
    }
}

/// Appends the backward graph.
pub struct Backward;

impl Pass for Backward {
    fn name(&self) -> &str {
        "backward"
    }
    fn apply(&self, g: &OperatorGraph) -> Result<(OperatorGraph, usize)> {
        let j = derive_backward(g)?;
        let added = j.nodes.len() - g.nodes.len();
        Ok((j, added))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<String>),
}

/// One entry of a pass pipeline description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, ParamValue>,
}

pub const PASS_NAMES: [&str; 5] = ["canonicalize", "fuse", "quantize", "recompute", "backward"];

fn no_params(s: &PassSpec) -> Result<()> {
    match s.params.keys().next() {
        Some(k) => Err(Error::config(format!("pass `{}` takes no parameter `{k}`", s.name))),
        None => Ok(()),
    }
}

pub fn pass_from_spec(s: &PassSpec) -> Result<Box<dyn Pass>> {
    Ok(match s.name.as_str() {
        "canonicalize" => {
            no_params(s)?;
            Box::new(Canonicalize)
        }
        "backward" => {
            no_params(s)?;
            Box::new(Backward)
        }
        "fuse" => {
            let rules = match s.params.get("rules") {
                None => rewrite::builtin_rewrites(),
                Some(ParamValue::List(names)) => names.iter().map(|n| rewrite::builtin_rewrite(n)).collect::<Result<_>>()?,
                Some(ParamValue::Str(n)) => alloc::vec![rewrite::builtin_rewrite(n)?],
                Some(v) => return Err(Error::config(format!("fuse: `rules` must be a list of names, got {v:?}"))),
            };
            if let Some(k) = s.params.keys().find(|k| *k != "rules") {
                return Err(Error::config(format!("fuse takes no parameter `{k}`")));
            }
            Box::new(Fuse(rules))
        }
        "quantize" => {
            let mut map = BTreeMap::new();
            for (k, v) in &s.params {
                let ParamValue::Str(p) = v else {
                    return Err(Error::config(format!("quantize: `{k}` must name a precision")));
                };
                map.insert(k.clone(), p.parse()?);
            }
            // Surface unknown keys at load time rather than first use.
            let probe = OperatorGraph::new();
            quantize(&probe, &map)?;
            Box::new(Quantize(map))
        }
        "recompute" => {
            let policy = match (s.params.get("policy"), s.params.get("tensors")) {
                (Some(ParamValue::Str(p)), None) if p == "full" => RecomputePolicy::Full,
                (None, Some(ParamValue::List(ts))) => {
                    RecomputePolicy::Tensors(ts.iter().map(|t| t.parse()).collect::<Result<_>>()?)
                }
                (None, None) => RecomputePolicy::Tensors(Vec::new()),
                _ => return Err(Error::config("recompute takes either `policy = \"full\"` or `tensors = [..]`")),
            };
            if let Some(k) = s.params.keys().find(|k| !matches!(k.as_str(), "policy" | "tensors")) {
                return Err(Error::config(format!("recompute takes no parameter `{k}`")));
            }
            Box::new(Recompute(policy))
        }
        other => return Err(Error::config(format!("unknown pass `{other}` (known: {})", PASS_NAMES.join(", ")))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_dense_block, ModelConfig};

    fn block() -> OperatorGraph {
        build_dense_block(&ModelConfig::dense(16, 2, 32, 1, 1, 4)).unwrap()
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let g = block();
        let (out, reports) = PassPipeline::new().run(&g).unwrap();
        assert_eq!(out, g);
        assert!(reports.is_empty());
    }

    #[test]
    fn unknown_pass_rejected() {
        let spec = PassSpec { name: "vectorize".into(), params: BTreeMap::new() };
        assert!(matches!(pass_from_spec(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn failing_pass_is_named() {
        // Recompute on a forward-only graph fails.
        let p = PassPipeline::new().with(Recompute(RecomputePolicy::Tensors(alloc::vec![TensorRef::output("q_proj", 0)])));
        match p.run(&block()) {
            Err(Error::Pass { pass, .. }) => assert_eq!(pass, "recompute"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pass_order_both_valid() {
        let q = || Quantize(BTreeMap::from([("all".into(), Precision::Fp8)]));
        let f = || Fuse(rewrite::builtin_rewrites());
        let g = block();
        let (a, ra) = PassPipeline::new().with(q()).with(f()).run(&g).unwrap();
        let (b, rb) = PassPipeline::new().with(f()).with(q()).run(&g).unwrap();
        a.validate().unwrap();
        b.validate().unwrap();
        assert_eq!(ra, PassPipeline::new().with(q()).with(f()).run(&g).unwrap().1);
        assert_eq!(rb[0].matches, ra[1].matches);
    }
}
