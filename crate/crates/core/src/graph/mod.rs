//! Operator-graph intermediate representation.
//!
//! A graph is a topologically ordered list of typed operator nodes. Tensors
//! are addressed by [`TensorRef`]: either a named graph input or the n-th
//! output of a node. Only tensor metadata flows through the graph; no values.

mod backward;
mod build;
pub(crate) mod cost;
mod kind;
mod validate;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use backward::{derive_backward, gradient_outputs, saved_activations};
pub use build::{build_block, build_decode_block, build_dense_block, build_moe_block, build_prefill_chunk, ModelConfig, MoeConfig};
pub use cost::{comm_payload_bytes, op_bytes, op_flops, CAUSAL_FULL_ATTR};
pub use kind::{EltwiseOp, OpKind};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Bf16,
    Fp16,
    Fp8,
    Int8,
}

impl Precision {
    pub const ALL: [Precision; 5] = [Precision::Fp32, Precision::Bf16, Precision::Fp16, Precision::Fp8, Precision::Int8];

    pub fn bytes(self) -> u64 {
        match self {
            Precision::Fp32 => 4,
            Precision::Bf16 | Precision::Fp16 => 2,
            Precision::Fp8 | Precision::Int8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Bf16 => "bf16",
            Precision::Fp16 => "fp16",
            Precision::Fp8 => "fp8",
            Precision::Int8 => "int8",
        }
    }

    /// Small integer code used as a predictor feature.
    pub fn code(self) -> f64 {
        match self {
            Precision::Fp32 => 0.0,
            Precision::Bf16 => 1.0,
            Precision::Fp16 => 2.0,
            Precision::Fp8 => 3.0,
            Precision::Int8 => 4.0,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown precision `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Activation,
    Weight,
    Gradient,
    OptimizerState,
    KvCache,
    Buffer,
}

impl TensorRole {
    pub const ALL: [TensorRole; 6] = [
        TensorRole::Activation,
        TensorRole::Weight,
        TensorRole::Gradient,
        TensorRole::OptimizerState,
        TensorRole::KvCache,
        TensorRole::Buffer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::Activation => "activation",
            TensorRole::Weight => "weight",
            TensorRole::Gradient => "gradient",
            TensorRole::OptimizerState => "optimizer_state",
            TensorRole::KvCache => "kv_cache",
            TensorRole::Buffer => "buffer",
        }
    }
}

impl FromStr for TensorRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TensorRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown tensor role `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<u64>,
    pub dtype: Precision,
    pub role: TensorRole,
}

impl TensorMeta {
    pub fn new(shape: impl Into<Vec<u64>>, dtype: Precision, role: TensorRole) -> Self {
        TensorMeta { shape: shape.into(), dtype, role }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() * self.dtype.bytes()
    }

    pub fn with_shape(&self, shape: Vec<u64>) -> Self {
        TensorMeta { shape, dtype: self.dtype, role: self.role }
    }

    pub fn with_role(&self, role: TensorRole) -> Self {
        TensorMeta { shape: self.shape.clone(), dtype: self.dtype, role }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
    Optimizer,
}

/// Reference to a tensor: a named graph input or output `index` of node `node`.
///
/// Textual form is `name` for inputs and `node:index` for node outputs.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorRef {
    Input(String),
    Output { node: String, index: usize },
}

impl TensorRef {
    pub fn input(name: impl Into<String>) -> Self {
        TensorRef::Input(name.into())
    }

    pub fn output(node: impl Into<String>, index: usize) -> Self {
        TensorRef::Output { node: node.into(), index }
    }

    pub fn node(&self) -> Option<&str> {
        match self {
            TensorRef::Output { node, .. } => Some(node),
            TensorRef::Input(_) => None,
        }
    }
}

impl fmt::Display for TensorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorRef::Input(name) => f.write_str(name),
            TensorRef::Output { node, index } => write!(f, "{node}:{index}"),
        }
    }
}

impl FromStr for TensorRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.rsplit_once(':') {
            Some((node, idx)) => {
                let index = idx
                    .parse()
                    .map_err(|_| Error::config(format!("bad output index in tensor ref `{s}`")))?;
                Ok(TensorRef::Output { node: node.to_string(), index })
            }
            None => Ok(TensorRef::Input(s.to_string())),
        }
    }
}

impl Serialize for TensorRef {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TensorRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Ints(Vec<i64>),
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}
impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}
impl From<u64> for AttrValue {
    fn from(v: u64) -> Self {
        AttrValue::Int(v as i64)
    }
}
impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}
impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_string())
    }
}
impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// Attribute names the passes and engines agree on.
pub mod attr {
    /// Tensor-parallel role of a node: `col`, `row`, `attn`, `local`, `rep`.
    pub const SHARD: &str = "shard";
    /// Node whose output 0 enters a tensor-parallel region.
    pub const TP_REGION_IN: &str = "tp_region_in";
    /// Node whose output 0 leaves a tensor-parallel region (partial sums).
    pub const TP_REGION_OUT: &str = "tp_region_out";
    /// Number of ranks that execute an identical copy of this node.
    pub const REPLICAS: &str = "replicas";
    /// Logical rank group of a communication node (`tp`, `dp`, `ep`, `pp`).
    pub const GROUP: &str = "group";
    pub const GROUP_SIZE: &str = "group_size";
    /// Tensor dimension gathered or scattered by all_gather / reduce_scatter.
    pub const DIM: &str = "dim";
    /// Explicit communication payload in bytes.
    pub const PAYLOAD_BYTES: &str = "payload_bytes";
    /// all_to_all per-peer chunk size in elements.
    pub const PAYLOAD: &str = "payload";
    /// Identity-forward marker whose gradient needs the named collective.
    pub const BWD_COMM: &str = "bwd_comm";
    pub const BACKWARD: &str = "backward";
    pub const GRAD_OF: &str = "grad_of";
    pub const HEADS: &str = "heads";
    pub const KV_HEADS: &str = "kv_heads";
    pub const HEAD_DIM: &str = "head_dim";
    pub const CAUSAL: &str = "causal";
    pub const TOP_K: &str = "top_k";
    pub const TRANSPOSE_A: &str = "transpose_a";
    pub const TRANSPOSE_B: &str = "transpose_b";
    pub const REDUCE: &str = "reduce";
    pub const FLOPS: &str = "flops";
    pub const TOKENS: &str = "tokens";
    pub const EXPERT: &str = "expert";
    pub const MOE: &str = "moe";
    pub const MOE_ROUTING: &str = "moe_routing";
    pub const LOAD_FACTOR: &str = "load_factor";
    /// Coarse block region used for time breakdowns: `attention`, `ffn`, `other`.
    pub const BLOCK_PART: &str = "block_part";
    /// Run once per optimizer step rather than once per microbatch.
    pub const STEP_ONCE: &str = "step_once";
    pub const DP_ROLE: &str = "dp_role";
    pub const RECOMPUTE: &str = "recompute";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<TensorRef>,
    pub outputs: Vec<TensorMeta>,
    #[serde(default)]
    pub attrs: Attrs,
    pub phase: Phase,
}

impl OpNode {
    pub fn new(id: impl Into<String>, kind: OpKind, phase: Phase) -> Self {
        OpNode { id: id.into(), kind, inputs: Vec::new(), outputs: Vec::new(), attrs: Attrs::new(), phase }
    }

    pub fn with_inputs(mut self, inputs: impl IntoIterator<Item = TensorRef>) -> Self {
        self.inputs = inputs.into_iter().collect();
        self
    }

    pub fn with_output(mut self, meta: TensorMeta) -> Self {
        self.outputs.push(meta);
        self
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn set_attr(&mut self, key: &str, value: impl Into<AttrValue>) {
        self.attrs.insert(key.to_string(), value.into());
    }

    pub fn out(&self, index: usize) -> TensorRef {
        TensorRef::output(self.id.clone(), index)
    }

    pub fn attr_i64(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v),
            AttrValue::Float(v) => Some(*v as i64),
            _ => None,
        }
    }

    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attr_i64(key).and_then(|v| u64::try_from(v).ok())
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v as f64),
            AttrValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_bool(&self, key: &str) -> bool {
        matches!(self.attrs.get(key), Some(AttrValue::Bool(true)))
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key)? {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Number of ranks executing an identical copy of this node (default 1).
    pub fn replicas(&self) -> u64 {
        self.attr_u64(attr::REPLICAS).unwrap_or(1).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    #[serde(flatten)]
    pub meta: TensorMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphOutput {
    pub name: String,
    #[serde(rename = "ref")]
    pub tensor: TensorRef,
}

/// A topologically ordered operator graph representing `block_multiplier`
/// identical blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorGraph {
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<OpNode>,
    pub outputs: Vec<GraphOutput>,
    pub block_multiplier: u64,
}

impl Default for OperatorGraph {
    fn default() -> Self {
        OperatorGraph { inputs: Vec::new(), nodes: Vec::new(), outputs: Vec::new(), block_multiplier: 1 }
    }
}

impl OperatorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_input(&mut self, name: impl Into<String>, meta: TensorMeta) -> TensorRef {
        let name = name.into();
        self.inputs.push(GraphInput { name: name.clone(), meta });
        TensorRef::Input(name)
    }

    /// Appends a node and returns a reference to its first output.
    pub fn push(&mut self, node: OpNode) -> TensorRef {
        let r = node.out(0);
        self.nodes.push(node);
        r
    }

    pub fn add_output(&mut self, name: impl Into<String>, tensor: TensorRef) {
        self.outputs.push(GraphOutput { name: name.into(), tensor });
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&GraphOutput> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Map from node id to position.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Resolves a reference against an index built by [`OperatorGraph::index`].
    pub fn resolve_with<'a>(&'a self, index: &BTreeMap<&str, usize>, r: &TensorRef) -> Option<&'a TensorMeta> {
        match r {
            TensorRef::Input(name) => self.input(name).map(|i| &i.meta),
            TensorRef::Output { node, index: k } => index.get(node.as_str()).and_then(|&i| self.nodes[i].outputs.get(*k)),
        }
    }

    pub fn resolve(&self, r: &TensorRef) -> Option<&TensorMeta> {
        match r {
            TensorRef::Input(name) => self.input(name).map(|i| &i.meta),
            TensorRef::Output { node, index } => self.node(node).and_then(|n| n.outputs.get(*index)),
        }
    }

    /// Input metadata of node `i`, in input order.
    pub fn input_metas(&self, index: &BTreeMap<&str, usize>, i: usize) -> Result<Vec<&TensorMeta>> {
        let node = &self.nodes[i];
        node.inputs
            .iter()
            .map(|r| {
                self.resolve_with(index, r)
                    .ok_or_else(|| Error::DanglingRef { node: node.id.clone(), reference: r.to_string() })
            })
            .collect()
    }

    /// True when the graph already contains backward-phase nodes.
    pub fn is_joint(&self) -> bool {
        self.nodes.iter().any(|n| n.phase == Phase::Backward)
    }

    /// For each tensor, the positions of the nodes consuming it.
    pub fn consumers(&self) -> BTreeMap<TensorRef, Vec<usize>> {
        let mut map: BTreeMap<TensorRef, Vec<usize>> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for r in &n.inputs {
                let e = map.entry(r.clone()).or_default();
                if e.last() != Some(&i) {
                    e.push(i);
                }
            }
        }
        map
    }

    /// FLOPs of every node, in node order.
    pub fn node_flops(&self) -> Result<Vec<u64>> {
        let index = self.index();
        (0..self.nodes.len())
            .map(|i| {
                let ins = self.input_metas(&index, i)?;
                Ok(op_flops(&self.nodes[i], &ins))
            })
            .collect()
    }

    /// Sum of node FLOPs for one block.
    pub fn flops(&self) -> Result<u64> {
        Ok(self.node_flops()?.iter().sum())
    }

    /// Block FLOPs summed over `ranks` ranks that each run this graph,
    /// counting a node replicated on `r` of them once per replica set.
    pub fn group_flops(&self, ranks: u64) -> Result<u64> {
        let per_node = self.node_flops()?;
        self.nodes
            .iter()
            .zip(per_node)
            .map(|(n, f)| {
                let r = n.replicas();
                if ranks % r != 0 {
                    return Err(Error::invalid(&n.id, format!("replicas {r} does not divide group of {ranks}")));
                }
                Ok(f * (ranks / r))
            })
            .sum()
    }

    /// FLOPs of the nodes in one phase.
    pub fn phase_flops(&self, phase: Phase) -> Result<u64> {
        let per_node = self.node_flops()?;
        Ok(self.nodes.iter().zip(per_node).filter(|(n, _)| n.phase == phase).map(|(_, f)| f).sum())
    }

    /// Whole-model FLOPs: block FLOPs scaled by `block_multiplier`.
    pub fn model_flops(&self) -> Result<u64> {
        Ok(self.flops()? * self.block_multiplier)
    }

    /// Total elements of weight-role inputs consumed by matmul-like nodes.
    pub fn matmul_weight_params(&self) -> u64 {
        let mut seen: Vec<&str> = Vec::new();
        let mut total = 0;
        for n in &self.nodes {
            if !matches!(n.kind, OpKind::Matmul | OpKind::BatchedMatmul) && !n.kind.contains(&OpKind::Matmul) {
                continue;
            }
            for r in &n.inputs {
                if let TensorRef::Input(name) = r {
                    if let Some(gi) = self.input(name) {
                        if gi.meta.role == TensorRole::Weight && !seen.contains(&name.as_str()) {
                            seen.push(name);
                            total += gi.meta.numel();
                        }
                    }
                }
            }
        }
        total
    }

    /// Bytes of all weight-role graph inputs.
    pub fn weight_bytes(&self) -> u64 {
        self.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.meta.bytes()).sum()
    }

    /// Full check of structural invariants; see [`validate`](Self::validate).
    pub fn validate(&self) -> Result<()> {
        validate::validate(self)
    }

    /// Reorders nodes topologically (stable), failing on cycles.
    pub fn toposort(&mut self) -> Result<()> {
        validate::toposort(self)
    }

    /// Rewrites every use of `from` (node inputs and graph outputs) to `to`.
    pub fn replace_uses(&mut self, from: &TensorRef, to: &TensorRef, start: usize) {
        for n in &mut self.nodes[start..] {
            for r in &mut n.inputs {
                if r == from {
                    *r = to.clone();
                }
            }
        }
        for o in &mut self.outputs {
            if &o.tensor == from {
                o.tensor = to.clone();
            }
        }
    }

    /// Generates a node id not yet used in this graph.
    pub fn fresh_id(&self, base: &str) -> String {
        if self.node(base).is_none() {
            return base.to_string();
        }
        (1..).map(|k| format!("{base}.{k}")).find(|id| self.node(id).is_none()).unwrap()
    }
}
