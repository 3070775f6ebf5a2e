//! Design-space exploration: enumeration, rule-based pruning, candidate
//! evaluation, frontier and SLO selection, and the sequence-parallel planner.

mod eval;
mod frontier;
mod space;
mod sp;

pub use eval::{candidate_workload, evaluate, throughput_points, EvalPoint, Metrics};
pub use frontier::{best_under_slo, frontier, pareto_frontier, Slo};
pub use sp::{plan_dynamic_sp, uniform_zigzag, zigzag_chunks, AttentionCost, SpChoice, SpCost, SpPlan};
pub use space::{
    default_rules, describe, enumerate_all, enumerate_space, node_size, prune, select_rules, static_memory_bound, Candidate, PruneRule, Pruned,
    SearchSpace, DEFAULT_RULES,
};
