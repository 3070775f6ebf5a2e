//! Operator pricing: roofline, collective closed forms over a tiered
//! topology, profile lookup, tree-ensemble prediction and a prioritized
//! engine stack.

mod calibrate;
mod collective;
mod forest;
mod hw;
mod predictor;
mod profile;
mod roofline;
mod stack;
mod synth;

pub use calibrate::{calibrate_links, LinkFit, LinkSample};
pub use collective::{closed_form, collective_time, p2p_time, CollectiveAlgo, CollectiveKind, CommCost};
pub use forest::{Forest, ForestParams};
pub use hw::{two_tier, HardwareSpec, LinkTier, TierKind};
pub use predictor::{features, node_from_record, train_kind, KindModel, Predictor, FEATURES, MIN_RECORDS};
pub use profile::{parse_signature, shape_signature, LatencyStats, ProfileDb, ProfileKey, ProfileRecord, PRICING_ATTRS};
pub use roofline::{node_precision, roofline_counts, roofline_time};
pub use stack::{engine_usage, parse_order, EngineKind, EngineStack, GraphPricer, NodeCost};
pub use synth::roofline_records;
