//! Design-space search files and concurrent candidate evaluation.
//!
//! ```toml
//! version = "charon-space/1"
//! scenario = "tiny_decode.toml"
//! rules = ["divisibility", "static_memory"]
//!
//! [axes]
//! tp = [1, 2, 4]
//! pp = [1]
//! world_sizes = [4, 8]
//! batch = [1, 8, 32]
//!
//! [slo]
//! min_tps_per_user = 20.0
//! ```
//!
//! `rules` defaults to every shipped rule; `mode` overrides the scenario's.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use opsim_core::dse::{best_under_slo, default_rules, enumerate_all, evaluate, frontier, prune, select_rules, EvalPoint, Pruned, SearchSpace, Slo, DEFAULT_RULES};
use opsim_core::engines::EngineStack;
use opsim_core::run::{Mode, ModelSource, Workload};

use crate::format::{load_toml, resolve, SPACE_VERSION};
use crate::scenario::{Scenario, Target};
use crate::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    scenario: PathBuf,
    mode: Option<Mode>,
    rules: Option<Vec<String>>,
    axes: SearchSpace,
    #[serde(default)]
    slo: Slo,
    #[serde(default)]
    outputs: SearchOutputs,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOutputs {
    pub table: Option<PathBuf>,
    pub frontier: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Space {
    pub path: PathBuf,
    pub scenario: Scenario,
    pub base: Workload,
    pub rules: Vec<String>,
    pub axes: SearchSpace,
    pub slo: Slo,
    pub outputs: SearchOutputs,
}

impl Space {
    pub fn load(path: &Path) -> Result<Space> {
        let f: SpaceFile = load_toml(path, SPACE_VERSION)?;
        f.axes.validate().map_err(|e| Error::parse(path, e))?;
        let scenario = Scenario::load(&resolve(path, &f.scenario))?;
        let mut base = match &scenario.target {
            Target::Workload(w) if matches!(w.model, ModelSource::Config(_)) => (**w).clone(),
            _ => return Err(Error::parse(path, "the base scenario must describe the model by its dimensions")),
        };
        if let Some(m) = f.mode {
            if m != Mode::Train && base.mode == Mode::Train {
                base.passes.retain(|p| p.name != "backward" && p.name != "recompute");
            }
            base.mode = m;
        }
        let outputs = SearchOutputs { table: f.outputs.table.map(|p| resolve(path, &p)), frontier: f.outputs.frontier.map(|p| resolve(path, &p)) };
        Ok(Space {
            path: path.to_path_buf(),
            scenario,
            base,
            rules: f.rules.unwrap_or_else(|| DEFAULT_RULES.iter().map(|s| s.to_string()).collect()),
            axes: f.axes,
            slo: f.slo,
            outputs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchResult {
    /// Evaluated candidates in enumeration order.
    pub points: Vec<EvalPoint>,
    pub pruned: Vec<Pruned>,
    /// Indices into `points`.
    pub frontier: Vec<usize>,
    pub best_under_slo: Option<usize>,
}

/// Enumerates, prunes and evaluates every kept candidate in parallel.
/// Results keep enumeration order regardless of scheduling.
pub fn search(space: &Space, stack: &EngineStack) -> Result<SearchResult> {
    let ModelSource::Config(model) = &space.base.model else {
        return Err(Error::config("search needs a model configuration"));
    };
    let cands = enumerate_all(&space.axes, &space.base.parallel, model.batch)?;
    let context = space.base.context.unwrap_or(model.seq_len);
    let rules = select_rules(default_rules(model, &stack.hw, space.base.mode, &space.base.memory, context)?, &space.rules)?;
    let total = cands.len();
    let (kept, pruned) = prune(cands, &rules);
    for p in &pruned {
        log::info!("pruned [{}] by {}", p.candidate, p.rule);
    }
    log::info!("{total} candidates, {} pruned, {} to evaluate", pruned.len(), kept.len());
    if kept.is_empty() {
        log::warn!("every candidate was pruned; the result table is empty");
    }
    let points: Vec<EvalPoint> = kept.par_iter().map(|c| evaluate(c, &space.base, stack)).collect();
    let frontier = frontier(&points);
    let best = best_under_slo(&points, &space.slo);
    Ok(SearchResult { points, pruned, frontier, best_under_slo: best })
}

const COLUMNS: [&str; 22] = [
    "index",
    "world",
    "tp",
    "pp",
    "dp",
    "ep",
    "sp",
    "microbatches",
    "pp_schedule",
    "dp_mode",
    "batch",
    "prefill_chunk",
    "feasible",
    "reason",
    "step_time_us",
    "ttft_us",
    "tpot_us",
    "tps_per_gpu",
    "tps_per_user",
    "peak_mem",
    "mfu",
    "frontier",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per evaluated point.
pub fn table_csv(r: &SearchResult) -> Result<String> {
    let err = |e: csv::Error| Error::config(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(err)?;
    for (i, p) in r.points.iter().enumerate() {
        let (c, m) = (&p.candidate, &p.metrics);
        let q = &c.parallel;
        w.write_record([
            i.to_string(),
            c.world.to_string(),
            q.tp.to_string(),
            q.pp.to_string(),
            q.dp.to_string(),
            q.ep.to_string(),
            q.sp.to_string(),
            q.microbatches.to_string(),
            q.pp_schedule.to_string(),
            q.dp_mode.to_string(),
            c.batch.to_string(),
            opt(c.prefill_chunk),
            p.feasible.to_string(),
            p.reason.clone().unwrap_or_default(),
            m.step_time_us.to_string(),
            opt(m.ttft_us),
            opt(m.tpot_us),
            opt(m.tps_per_gpu),
            opt(m.tps_per_user),
            m.peak_mem.to_string(),
            m.mfu.to_string(),
            r.frontier.contains(&i).to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
}

#[derive(Serialize)]
struct FrontierPoint<'a> {
    index: usize,
    #[serde(flatten)]
    point: &'a EvalPoint,
}

#[derive(Serialize)]
struct FrontierDoc<'a> {
    frontier: Vec<FrontierPoint<'a>>,
    best_under_slo: Option<FrontierPoint<'a>>,
    slo: &'a Slo,
    pruned: &'a [Pruned],
}

/// The frontier subset, the SLO pick and the pruned candidates.
pub fn frontier_json(r: &SearchResult, slo: &Slo) -> Result<String> {
    let at = |index: usize| FrontierPoint { index, point: &r.points[index] };
    let doc = FrontierDoc { frontier: r.frontier.iter().map(|&i| at(i)).collect(), best_under_slo: r.best_under_slo.map(at), slo, pruned: &r.pruned };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
