use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{kv_cache_bytes, MemoryOptions};
use crate::engines::HardwareSpec;
use crate::graph::{build_block, ModelConfig, TensorRole};
use crate::parallel::{validate_config, DpMode, ParallelismConfig, PpSchedule};
use crate::run::Mode;
use crate::{Error, Result};

/// One point of the design space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub world: u64,
    pub parallel: ParallelismConfig,
    /// Global batch (training) or concurrent sequences (inference).
    pub batch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_chunk: Option<u64>,
}

fn ones() -> Vec<u64> {
    vec![1]
}

fn one_f_one_b() -> Vec<PpSchedule> {
    vec![PpSchedule::OneFOneB]
}

fn ddp() -> Vec<DpMode> {
    vec![DpMode::Ddp]
}

/// Candidate values per axis. An empty `dp` axis derives dp as
/// `world / (tp * pp)`; an empty `batch` axis uses the model's batch; an
/// empty `prefill_chunks` axis prefills whole prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub tp: Vec<u64>,
    pub pp: Vec<u64>,
    #[serde(default)]
    pub dp: Vec<u64>,
    #[serde(default = "ones")]
    pub ep: Vec<u64>,
    #[serde(default = "ones")]
    pub sp: Vec<u64>,
    #[serde(default = "ones")]
    pub microbatches: Vec<u64>,
    #[serde(default)]
    pub batch: Vec<u64>,
    #[serde(default)]
    pub prefill_chunks: Vec<u64>,
    pub world_sizes: Vec<u64>,
    #[serde(default = "one_f_one_b")]
    pub schedules: Vec<PpSchedule>,
    #[serde(default = "ddp")]
    pub dp_modes: Vec<DpMode>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            tp: ones(),
            pp: ones(),
            dp: Vec::new(),
            ep: ones(),
            sp: ones(),
            microbatches: ones(),
            batch: Vec::new(),
            prefill_chunks: Vec::new(),
            world_sizes: ones(),
            schedules: one_f_one_b(),
            dp_modes: ddp(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let required: [(&str, &Vec<u64>); 7] = [
            ("tp", &self.tp),
            ("pp", &self.pp),
            ("ep", &self.ep),
            ("sp", &self.sp),
            ("microbatches", &self.microbatches),
            ("world_sizes", &self.world_sizes),
            ("dp", &self.dp),
        ];
        for (name, axis) in required {
            if axis.is_empty() && name != "dp" {
                return Err(Error::config(format!("search axis `{name}` is empty")));
            }
            if axis.contains(&0) {
                return Err(Error::config(format!("search axis `{name}` contains 0")));
            }
        }
        if self.batch.contains(&0) || self.prefill_chunks.contains(&0) {
            return Err(Error::config("batch and prefill chunk sizes must be positive"));
        }
        if self.schedules.is_empty() || self.dp_modes.is_empty() {
            return Err(Error::config("search axes `schedules` and `dp_modes` must not be empty"));
        }
        Ok(())
    }

    /// Upper bound on candidates before filtering.
    pub fn product_size(&self) -> u64 {
        let n = |v: &Vec<u64>| v.len().max(1) as u64;
        [n(&self.tp), n(&self.pp), n(&self.dp), n(&self.ep), n(&self.sp), n(&self.microbatches), n(&self.batch), n(&self.prefill_chunks), n(&self.world_sizes)]
            .iter()
            .product::<u64>()
            * self.schedules.len() as u64
            * self.dp_modes.len() as u64
    }
}

/// Cartesian product of the axes for one world size, keeping the
/// configurations that pass [`validate_config`]. `base` supplies the fields
/// the space does not vary (rank order, bucket size, stage layers).
pub fn enumerate_space(space: &SearchSpace, world: u64, base: &ParallelismConfig, default_batch: u64) -> Result<Vec<Candidate>> {
    space.validate()?;
    let batches = if space.batch.is_empty() { vec![default_batch] } else { space.batch.clone() };
    let chunks: Vec<Option<u64>> = if space.prefill_chunks.is_empty() { vec![None] } else { space.prefill_chunks.iter().map(|&c| Some(c)).collect() };
    let mut out = Vec::new();
    for &tp in &space.tp {
        for &pp in &space.pp {
            let dps = if space.dp.is_empty() {
                if world % (tp * pp) == 0 {
                    vec![world / (tp * pp)]
                } else {
                    Vec::new()
                }
            } else {
                space.dp.clone()
            };
            for &dp in &dps {
                for &ep in &space.ep {
                    for &sp in &space.sp {
                        for &m in &space.microbatches {
                            for &sched in &space.schedules {
                                for &mode in &space.dp_modes {
                                    let cfg = ParallelismConfig {
                                        tp,
                                        pp,
                                        dp,
                                        ep,
                                        sp,
                                        microbatches: m,
                                        pp_schedule: sched,
                                        dp_mode: mode,
                                        world_size: world,
                                        stage_layers: if base.stage_layers.len() as u64 == pp { base.stage_layers.clone() } else { Vec::new() },
                                        ..base.clone()
                                    };
                                    if validate_config(&cfg, world).is_err() {
                                        continue;
                                    }
                                    for &batch in &batches {
                                        for &chunk in &chunks {
                                            out.push(Candidate { world, parallel: cfg.clone(), batch, prefill_chunk: chunk });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Every world size of the space, in axis order.
pub fn enumerate_all(space: &SearchSpace, base: &ParallelismConfig, default_batch: u64) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for &w in &space.world_sizes {
        out.extend(enumerate_space(space, w, base, default_batch)?);
    }
    Ok(out)
}

type Predicate = Box<dyn Fn(&Candidate) -> bool + Send + Sync>;

/// A named rule; the candidate is pruned when `prunes` returns true. Safe
/// rules only remove candidates that cannot be feasible.
pub struct PruneRule {
    pub name: String,
    pub rationale: String,
    pub safe: bool,
    prunes: Predicate,
}

impl PruneRule {
    pub fn new(name: &str, rationale: &str, safe: bool, prunes: impl Fn(&Candidate) -> bool + Send + Sync + 'static) -> Self {
        PruneRule { name: name.into(), rationale: rationale.into(), safe, prunes: Box::new(prunes) }
    }

    pub fn prunes(&self, c: &Candidate) -> bool {
        (self.prunes)(c)
    }
}

impl core::fmt::Debug for PruneRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("PruneRule").field("name", &self.name).field("safe", &self.safe).finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pruned {
    pub candidate: Candidate,
    pub rule: String,
}

/// Splits candidates into kept and pruned, tagging each pruned one with the
/// first rule that fired. Order is preserved on both sides.
pub fn prune(candidates: Vec<Candidate>, rules: &[PruneRule]) -> (Vec<Candidate>, Vec<Pruned>) {
    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for c in candidates {
        match rules.iter().find(|r| r.prunes(&c)) {
            Some(r) => pruned.push(Pruned { candidate: c, rule: r.name.clone() }),
            None => kept.push(c),
        }
    }
    (kept, pruned)
}

pub const DEFAULT_RULES: [&str; 4] = ["divisibility", "intra_node_tp", "static_memory", "microbatch_ge_pp"];

/// Devices sharing rank 0's innermost topology tier, or 8 without a topology.
pub fn node_size(hw: &HardwareSpec) -> u64 {
    hw.tier_of(0, 0).map_or(8, |t| hw.topology[t].members.len() as u64)
}

/// Parameter count of one block.
fn block_params(model: &ModelConfig) -> Result<u64> {
    let tiny = ModelConfig { batch: 1, seq_len: 1, ..model.clone() };
    let g = build_block(&tiny)?;
    Ok(g.inputs.iter().filter(|i| i.meta.role == TensorRole::Weight).map(|i| i.meta.numel()).sum())
}

/// Lower bound on a rank's persistent bytes: weights, gradients and
/// optimizer states (training) or weights and the KV cache of `context`
/// tokens (decoding), with every tensor assumed split over tp, ep and pp.
pub fn static_memory_bound(c: &Candidate, model: &ModelConfig, mode: Mode, memory: &MemoryOptions, params_per_layer: u64, context: u64) -> f64 {
    let p = &c.parallel;
    let split = (p.tp * p.pp * p.ep) as f64;
    let params = params_per_layer as f64 * model.num_layers as f64 / split;
    let elem = model.precision.bytes() as f64;
    let dp = p.dp as f64;
    let by = |sharded: bool| if sharded { dp } else { 1.0 };
    match mode {
        Mode::Train => {
            let weights = params * elem / by(p.dp_mode.shards_params());
            let grads = params * elem / by(!matches!(p.dp_mode, DpMode::Ddp | DpMode::Zero1));
            let optim = params * memory.optimizer_bytes_per_param / by(p.dp_mode != DpMode::Ddp);
            weights + grads + optim
        }
        Mode::Prefill => params * elem,
        Mode::Decode | Mode::Serve => {
            let kv = kv_cache_bytes(model.num_layers, model.num_kv_heads, model.head_dim, context, c.batch, model.precision.bytes());
            params * elem + kv as f64 / (split * dp)
        }
    }
}

/// The shipped rules: divisibility of model dimensions, tp within one
/// node, static memory above capacity, and at least pp microbatches.
/// `context` is the decode KV length.
pub fn default_rules(model: &ModelConfig, hw: &HardwareSpec, mode: Mode, memory: &MemoryOptions, context: u64) -> Result<Vec<PruneRule>> {
    model.validate()?;
    let m = model.clone();
    let divisibility = PruneRule::new("divisibility", "model dimensions must split evenly over the parallel axes", true, move |c| {
        let p = &c.parallel;
        let moe_bad = match &m.moe {
            Some(moe) => moe.num_experts % p.ep != 0,
            None => p.ep > 1,
        };
        m.num_heads % p.tp != 0
            || m.num_kv_heads % p.tp != 0
            || m.ffn_hidden % p.tp != 0
            || m.num_layers < p.pp
            || c.batch % (p.dp * p.microbatches) != 0
            || (p.sp > 1 && m.seq_len % p.sp != 0)
            || moe_bad
    });
    let node = node_size(hw);
    let intra = PruneRule::new("intra_node_tp", "tensor parallelism stays within one node", false, move |c| c.parallel.tp > node);
    let params = block_params(model)?;
    let (m, mem, cap) = (model.clone(), *memory, hw.mem_capacity);
    let static_mem = PruneRule::new("static_memory", "persistent bytes alone exceed device memory", true, move |c| {
        static_memory_bound(c, &m, mode, &mem, params, context) > cap
    });
    let mb = PruneRule::new("microbatch_ge_pp", "fewer microbatches than stages leaves stages idle", false, |c| {
        c.parallel.microbatches < c.parallel.pp
    });
    Ok(vec![divisibility, intra, static_mem, mb])
}

/// Selects shipped rules by name.
pub fn select_rules(all: Vec<PruneRule>, names: &[String]) -> Result<Vec<PruneRule>> {
    for n in names {
        if !all.iter().any(|r| &r.name == n) {
            return Err(Error::config(format!("unknown prune rule `{n}` (known: {})", DEFAULT_RULES.join(", "))));
        }
    }
    Ok(all.into_iter().filter(|r| names.contains(&r.name)).collect())
}

impl core::fmt::Display for Candidate {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let p = &self.parallel;
        write!(f, "world={} tp={} pp={} dp={} ep={} sp={} mb={} batch={}", self.world, p.tp, p.pp, p.dp, p.ep, p.sp, p.microbatches, self.batch)?;
        if let Some(c) = self.prefill_chunk {
            write!(f, " chunk={c}")?;
        }
        if p.pp > 1 {
            write!(f, " {}", p.pp_schedule)?;
        }
        if p.dp > 1 {
            write!(f, " {}", p.dp_mode)?;
        }
        Ok(())
    }
}

pub fn describe(c: &Candidate) -> String {
    c.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triples(v: &[Candidate]) -> Vec<(u64, u64, u64)> {
        v.iter().map(|c| (c.parallel.tp, c.parallel.pp, c.parallel.dp)).collect()
    }

    #[test]
    fn explicit_and_derived_dp() {
        let mut s = SearchSpace { tp: vec![1, 2], pp: vec![1, 2], dp: vec![1, 2], microbatches: vec![2], ..SearchSpace::default() };
        let base = ParallelismConfig::default();
        let got = enumerate_space(&s, 4, &base, 8).unwrap();
        assert_eq!(triples(&got), [(1, 2, 2), (2, 1, 2), (2, 2, 1)]);
        s.dp.clear();
        let got = enumerate_space(&s, 4, &base, 8).unwrap();
        assert_eq!(triples(&got), [(1, 1, 4), (1, 2, 2), (2, 1, 2), (2, 2, 1)]);
    }

    #[test]
    fn single_and_empty() {
        let s = SearchSpace { world_sizes: vec![1], ..SearchSpace::default() };
        assert_eq!(enumerate_all(&s, &ParallelismConfig::default(), 1).unwrap().len(), 1);
        let s = SearchSpace { tp: vec![3], world_sizes: vec![4], ..SearchSpace::default() };
        assert!(enumerate_all(&s, &ParallelismConfig::default(), 1).unwrap().is_empty());
    }

    #[test]
    fn tp_bound_rule() {
        let rules = vec![PruneRule::new("intra_node_tp", "", false, |c| c.parallel.tp > 8)];
        let s = SearchSpace { tp: vec![8, 16], world_sizes: vec![16], ..SearchSpace::default() };
        let all = enumerate_all(&s, &ParallelismConfig::default(), 2).unwrap();
        let (kept, pruned) = prune(all.clone(), &rules);
        assert_eq!(kept.len(), 1);
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned[0].rule, "intra_node_tp");
        assert_eq!(pruned[0].candidate.parallel.tp, 16);
        assert_eq!(prune(all.clone(), &[]).0, all);
    }
}
