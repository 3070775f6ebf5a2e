use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{OpNode, OperatorGraph};
use crate::{Error, Result};

/// Execution stream of a rank. Segments on one stream run in program order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    Compute,
    Comm(u8),
}

impl Stream {
    pub fn is_comm(self) -> bool {
        matches!(self, Stream::Comm(_))
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Compute => f.write_str("compute"),
            Stream::Comm(k) => write!(f, "comm{k}"),
        }
    }
}

/// Position of a graph node instance inside a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeInstance {
    pub graph: u32,
    pub node: u32,
    pub microbatch: u32,
    pub layer: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentOp {
    Node(NodeInstance),
    /// Point-to-point transfer to `peer`, matched with the peer's `Recv` of the same tag.
    Send { peer: u32, tag: u64, bytes: u64 },
    Recv { peer: u32, tag: u64, bytes: u64 },
    /// Opaque work of fixed duration.
    Task { label: String, duration_ns: f64 },
}

/// Rendezvous of a collective: every `present` rank must reach the segment
/// with the same tag before any of them starts. `group` lists the full set
/// of ranks taking part, which sets the cost even when only some are simulated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendezvous {
    pub tag: u64,
    pub present: Vec<u32>,
    pub group: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub op: SegmentOp,
    pub stream: Stream,
    /// Positions of segments of the same rank that must finish first.
    #[serde(default)]
    pub deps: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective: Option<Rendezvous>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankProgram {
    pub rank: u32,
    pub segments: Vec<Segment>,
}

/// Per-rank segment lists over a shared set of operator graphs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub graphs: Vec<OperatorGraph>,
    pub ranks: Vec<RankProgram>,
}

impl Program {
    pub fn node(&self, inst: &NodeInstance) -> Option<&OpNode> {
        self.graphs.get(inst.graph as usize)?.nodes.get(inst.node as usize)
    }

    pub fn rank_index(&self, rank: u32) -> Option<usize> {
        self.ranks.iter().position(|r| r.rank == rank)
    }

    pub fn segment_count(&self) -> usize {
        self.ranks.iter().map(|r| r.segments.len()).sum()
    }

    pub fn label(&self, seg: &Segment) -> String {
        match &seg.op {
            SegmentOp::Node(i) => match self.node(i) {
                Some(n) => format!("{} [mb{} L{}]", n.id, i.microbatch, i.layer),
                None => "?".to_string(),
            },
            SegmentOp::Send { peer, tag, .. } => format!("send->{peer} #{tag}"),
            SegmentOp::Recv { peer, tag, .. } => format!("recv<-{peer} #{tag}"),
            SegmentOp::Task { label, .. } => label.clone(),
        }
    }

    /// Structural checks: dependency indices point backwards, node
    /// references resolve, peers exist and rendezvous sets include their rank.
    pub fn validate(&self) -> Result<()> {
        for rp in &self.ranks {
            for (i, s) in rp.segments.iter().enumerate() {
                let at = || format!("rank {} segment {i}", rp.rank);
                if let Some(&d) = s.deps.iter().find(|&&d| d as usize >= i) {
                    return Err(Error::config(format!("{}: dependency {d} is not an earlier segment", at())));
                }
                match &s.op {
                    SegmentOp::Node(n) if self.node(n).is_none() => {
                        return Err(Error::config(format!("{}: unknown graph node", at())));
                    }
                    SegmentOp::Send { peer, .. } | SegmentOp::Recv { peer, .. } if self.rank_index(*peer).is_none() => {
                        return Err(Error::config(format!("{}: unknown peer {peer}", at())));
                    }
                    SegmentOp::Task { duration_ns, .. } if !(*duration_ns >= 0.0) => {
                        return Err(Error::config(format!("{}: negative or NaN duration", at())));
                    }
                    _ => {}
                }
                if let Some(c) = &s.collective {
                    if !c.present.contains(&rp.rank) {
                        return Err(Error::config(format!("{}: rendezvous does not include its own rank", at())));
                    }
                    if let Some(p) = c.present.iter().find(|p| self.rank_index(**p).is_none()) {
                        return Err(Error::config(format!("{}: rendezvous names unknown rank {p}", at())));
                    }
                }
            }
        }
        Ok(())
    }
}
