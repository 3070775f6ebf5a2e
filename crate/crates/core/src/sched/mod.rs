//! Discrete-event simulation of per-rank programs.

mod contention;
mod program;
mod sim;
mod timeline;

pub use contention::{integrate_flows, Flow, FlowOutcome, LinkId, LinkUse, RatePiece};
pub use program::{NodeInstance, Program, RankProgram, Rendezvous, Segment, SegmentOp, Stream};
pub use sim::{
    busy_time, exposed_comm, measure, place, ranks, simulate, OverlapModel, Placement, Priced, SegmentPricer, SimOptions,
    SlowdownFactors, TaskPricer, Transfer,
};
pub use timeline::{Timeline, TimelineEntry};
