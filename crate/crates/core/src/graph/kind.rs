use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EltwiseOp {
    Add,
    Mul,
    Silu,
    Gelu,
}

impl EltwiseOp {
    pub fn as_str(self) -> &'static str {
        match self {
            EltwiseOp::Add => "add",
            EltwiseOp::Mul => "mul",
            EltwiseOp::Silu => "silu",
            EltwiseOp::Gelu => "gelu",
        }
    }

    /// FLOPs per produced (or, for reductions, consumed) element.
    pub fn rate(self) -> u64 {
        match self {
            EltwiseOp::Add | EltwiseOp::Mul => 1,
            EltwiseOp::Silu => 4,
            EltwiseOp::Gelu => 8,
        }
    }
}

/// The closed operator set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Matmul,
    BatchedMatmul,
    Attention,
    Softmax,
    RmsNorm,
    LayerNorm,
    Elementwise(EltwiseOp),
    EmbeddingLookup,
    RouterTopk,
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    Send,
    Recv,
    Fused(Vec<OpKind>),
    Noop,
}

impl OpKind {
    pub fn is_comm(&self) -> bool {
        matches!(
            self,
            OpKind::AllReduce | OpKind::AllGather | OpKind::ReduceScatter | OpKind::AllToAll | OpKind::Send | OpKind::Recv
        )
    }

    pub fn is_collective(&self) -> bool {
        matches!(self, OpKind::AllReduce | OpKind::AllGather | OpKind::ReduceScatter | OpKind::AllToAll)
    }

    pub fn is_compute(&self) -> bool {
        !self.is_comm() && *self != OpKind::Noop
    }

    /// True if `self` is `other` or a fused kernel containing it.
    pub fn contains(&self, other: &OpKind) -> bool {
        match self {
            OpKind::Fused(parts) => parts.iter().any(|p| p.contains(other)),
            k => k == other,
        }
    }

    /// Every kind outside `Fused`, used for exhaustive registry checks.
    pub fn primitives() -> Vec<OpKind> {
        let mut v = alloc::vec![
            OpKind::Matmul,
            OpKind::BatchedMatmul,
            OpKind::Attention,
            OpKind::Softmax,
            OpKind::RmsNorm,
            OpKind::LayerNorm,
        ];
        v.extend([EltwiseOp::Add, EltwiseOp::Mul, EltwiseOp::Silu, EltwiseOp::Gelu].map(OpKind::Elementwise));
        v.extend([
            OpKind::EmbeddingLookup,
            OpKind::RouterTopk,
            OpKind::AllReduce,
            OpKind::AllGather,
            OpKind::ReduceScatter,
            OpKind::AllToAll,
            OpKind::Send,
            OpKind::Recv,
            OpKind::Noop,
        ]);
        v
    }

    fn simple_name(&self) -> Option<&'static str> {
        Some(match self {
            OpKind::Matmul => "matmul",
            OpKind::BatchedMatmul => "batched_matmul",
            OpKind::Attention => "attention",
            OpKind::Softmax => "softmax",
            OpKind::RmsNorm => "rmsnorm",
            OpKind::LayerNorm => "layernorm",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::RouterTopk => "router_topk",
            OpKind::AllReduce => "all_reduce",
            OpKind::AllGather => "all_gather",
            OpKind::ReduceScatter => "reduce_scatter",
            OpKind::AllToAll => "all_to_all",
            OpKind::Send => "send",
            OpKind::Recv => "recv",
            OpKind::Noop => "noop",
            OpKind::Elementwise(_) | OpKind::Fused(_) => return None,
        })
    }
}

// Text form: `matmul`, `elementwise.add`, `fused(matmul+elementwise.silu)`.
// `+` keeps the name free of commas so it can live in delimited files.
impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Elementwise(op) => write!(f, "elementwise.{}", op.as_str()),
            OpKind::Fused(parts) => {
                f.write_str("fused(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
            k => f.write_str(k.simple_name().unwrap()),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("fused(").and_then(|r| r.strip_suffix(')')) {
            let parts = split_top_level(inner).into_iter().map(str::parse).collect::<Result<Vec<_>>>()?;
            if parts.is_empty() {
                return Err(Error::config("fused kind with no constituents"));
            }
            return Ok(OpKind::Fused(parts));
        }
        if let Some(op) = s.strip_prefix("elementwise.") {
            let op = match op {
                "add" => EltwiseOp::Add,
                "mul" => EltwiseOp::Mul,
                "silu" => EltwiseOp::Silu,
                "gelu" => EltwiseOp::Gelu,
                _ => return Err(Error::config(format!("unknown elementwise op `{op}`"))),
            };
            return Ok(OpKind::Elementwise(op));
        }
        OpKind::primitives()
            .into_iter()
            .find(|k| k.simple_name() == Some(s))
            .ok_or_else(|| Error::config(format!("unknown op kind `{s}`")))
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if start < s.len() {
        parts.push(&s[start..]);
    }
    parts
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn names_round_trip() {
        for k in OpKind::primitives() {
            assert_eq!(k.to_string().parse::<OpKind>().unwrap(), k);
        }
        let f = OpKind::Fused(alloc::vec![OpKind::Matmul, OpKind::Elementwise(EltwiseOp::Silu)]);
        assert_eq!(f.to_string(), "fused(matmul+elementwise.silu)");
        assert_eq!(f.to_string().parse::<OpKind>().unwrap(), f);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("conv2d".parse::<OpKind>().is_err());
        assert!("elementwise.tanh".parse::<OpKind>().is_err());
    }
}
