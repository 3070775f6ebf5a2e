use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::collective::{collective_time, p2p_time, CollectiveAlgo, CollectiveKind, CommCost};
use super::profile::{ProfileDb, ProfileKey};
use super::roofline::{node_precision, roofline_time};
use super::{HardwareSpec, Predictor};
use crate::graph::{attr, comm_payload_bytes, OpNode, TensorMeta};
use crate::sched::{Priced, Program, Segment, SegmentOp, SegmentPricer, Transfer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Profile,
    Prediction,
    Analytical,
}

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Profile => "profile",
            EngineKind::Prediction => "prediction",
            EngineKind::Analytical => "analytical",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "profile" => Ok(EngineKind::Profile),
            "predict" | "prediction" => Ok(EngineKind::Prediction),
            "analytical" => Ok(EngineKind::Analytical),
            other => Err(Error::config(format!("unknown engine `{other}`"))),
        }
    }
}

/// Parses a comma-separated engine order such as `profile,predict,analytical`.
pub fn parse_order(s: &str) -> Result<Vec<EngineKind>> {
    let v: Vec<EngineKind> = s.split(',').filter(|x| !x.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::config("empty engine list"));
    }
    Ok(v)
}

/// A priced node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCost {
    pub ns: f64,
    pub engine: EngineKind,
    pub comm: Option<CommCost>,
}

/// Engines in priority order; the analytical engine backs every miss.
#[derive(Clone, Debug)]
pub struct EngineStack {
    pub order: Vec<EngineKind>,
    pub hw: HardwareSpec,
    pub profile: Option<ProfileDb>,
    pub predictor: Option<Predictor>,
    pub algo: CollectiveAlgo,
}

impl EngineStack {
    pub fn analytical(hw: HardwareSpec) -> Self {
        EngineStack { order: alloc::vec![EngineKind::Analytical], hw, profile: None, predictor: None, algo: CollectiveAlgo::Ring }
    }

    pub fn with_order(mut self, order: Vec<EngineKind>) -> Self {
        self.order = order;
        self
    }

    /// Registry check: can `engine` price nodes of this kind at all.
    pub fn supports(&self, engine: EngineKind, n: &OpNode) -> bool {
        match engine {
            EngineKind::Profile => self.profile.as_ref().is_some_and(|db| db.has_kind(&n.kind)),
            EngineKind::Prediction => self.predictor.as_ref().is_some_and(|p| p.device_id == self.hw.device_id && p.supports(&n.kind)),
            EngineKind::Analytical => true,
        }
    }

    /// Prices a node with the first engine that has an answer. `group` lists
    /// the global ranks of a communication node.
    pub fn price_node(&self, n: &OpNode, inputs: &[&TensorMeta], group: &[u32]) -> Result<NodeCost> {
        for &e in &self.order {
            if !self.supports(e, n) {
                continue;
            }
            match e {
                EngineKind::Profile => {
                    let key = ProfileKey::of(&self.hw.device_id, n, inputs);
                    if let Some(ns) = self.profile.as_ref().and_then(|db| db.lookup(&key)) {
                        return Ok(NodeCost { ns, engine: e, comm: None });
                    }
                }
                EngineKind::Prediction => {
                    let p = node_precision(n, inputs);
                    if let Some(ns) = self.predictor.as_ref().and_then(|pr| pr.predict(n, inputs, p)) {
                        return Ok(NodeCost { ns, engine: e, comm: None });
                    }
                }
                EngineKind::Analytical => break,
            }
        }
        self.analytical_cost(n, inputs, group)
    }

    pub fn analytical_cost(&self, n: &OpNode, inputs: &[&TensorMeta], group: &[u32]) -> Result<NodeCost> {
        match CollectiveKind::of(&n.kind) {
            Some(k) => {
                let bytes = comm_payload_bytes(n, inputs) as f64;
                let c = collective_time(k, self.algo, group, bytes, &self.hw)?;
                Ok(NodeCost { ns: c.ns, engine: EngineKind::Analytical, comm: Some(c) })
            }
            None => Ok(NodeCost { ns: roofline_time(n, inputs, &self.hw)?, engine: EngineKind::Analytical, comm: None }),
        }
    }
}

/// Ranks of the `size`-rank block containing `rank`, used when a
/// communication node carries no explicit rendezvous.
fn aligned_block(rank: u32, size: u32) -> Vec<u32> {
    let s = size.max(1);
    let base = rank - rank % s;
    (base..base + s).collect()
}

fn transfer(c: &CommCost) -> Option<Transfer> {
    Some(Transfer { latency_ns: c.latency_ns, links: c.links.clone() })
}

/// Prices the segments of one program with an engine stack. Compute nodes
/// are priced once per graph node.
pub struct GraphPricer<'a> {
    stack: &'a EngineStack,
    compute: Vec<Vec<Option<NodeCost>>>,
    inputs: Vec<Vec<Vec<TensorMeta>>>,
}

impl<'a> GraphPricer<'a> {
    pub fn new(stack: &'a EngineStack, program: &Program) -> Result<Self> {
        let mut compute = Vec::with_capacity(program.graphs.len());
        let mut inputs = Vec::with_capacity(program.graphs.len());
        for g in &program.graphs {
            let index = g.index();
            let mut c = Vec::with_capacity(g.nodes.len());
            let mut ins = Vec::with_capacity(g.nodes.len());
            for (i, n) in g.nodes.iter().enumerate() {
                let metas: Vec<TensorMeta> = g.input_metas(&index, i)?.into_iter().cloned().collect();
                if n.kind.is_comm() {
                    c.push(None);
                } else {
                    let refs: Vec<&TensorMeta> = metas.iter().collect();
                    c.push(Some(stack.price_node(n, &refs, &[])?));
                }
                ins.push(metas);
            }
            compute.push(c);
            inputs.push(ins);
        }
        Ok(GraphPricer { stack, compute, inputs })
    }
}

impl SegmentPricer for GraphPricer<'_> {
    fn price(&self, program: &Program, rank: u32, seg: &Segment) -> Result<Priced> {
        let engine = |e: EngineKind| e.as_str();
        match &seg.op {
            SegmentOp::Node(inst) => {
                let (g, i) = (inst.graph as usize, inst.node as usize);
                if let Some(c) = &self.compute[g][i] {
                    return Ok(Priced { ns: c.ns, engine: engine(c.engine), transfer: None });
                }
                let n = program.node(inst).ok_or_else(|| Error::config("segment references an unknown node"))?;
                let group: Vec<u32> = match &seg.collective {
                    Some(r) => r.group.clone(),
                    None => aligned_block(rank, n.attr_u64(attr::GROUP_SIZE).unwrap_or(1) as u32),
                };
                let refs: Vec<&TensorMeta> = self.inputs[g][i].iter().collect();
                let c = self.stack.price_node(n, &refs, &group)?;
                Ok(Priced { ns: c.ns, engine: engine(c.engine), transfer: c.comm.as_ref().and_then(transfer) })
            }
            SegmentOp::Send { peer, bytes, .. } | SegmentOp::Recv { peer, bytes, .. } => {
                let (src, dst) = if matches!(seg.op, SegmentOp::Send { .. }) { (rank, *peer) } else { (*peer, rank) };
                let c = p2p_time(src, dst, *bytes as f64, &self.stack.hw)?;
                Ok(Priced { ns: c.ns, engine: "analytical", transfer: transfer(&c) })
            }
            SegmentOp::Task { duration_ns, .. } => Ok(Priced { ns: *duration_ns, engine: "task", transfer: None }),
        }
    }
}

/// Engine used for each node of a graph, keyed by node id.
pub fn engine_usage(stack: &EngineStack, g: &crate::graph::OperatorGraph) -> Result<BTreeMap<String, String>> {
    let index = g.index();
    let mut out = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let ins = g.input_metas(&index, i)?;
        let group = aligned_block(0, n.attr_u64(attr::GROUP_SIZE).unwrap_or(1) as u32);
        let group = if stack.hw.topology.is_empty() { Vec::new() } else { group };
        out.insert(n.id.clone(), stack.price_node(n, &ins, &group)?.engine.to_string());
    }
    Ok(out)
}
