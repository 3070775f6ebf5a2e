//! End-to-end evaluation of one workload: graph generation, passes,
//! parallelization, pipeline program, simulation and analysis.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    breakdown, energy_estimate, Component, expand_layers, memory_timeline, mfu, model_precision, operator_table, saved_activation_bytes, Breakdown,
    CategoryMap, MemoryOptions, MemoryPeaks, Report,
};
use crate::engines::{EngineStack, GraphPricer};
use crate::graph::{build_block, build_decode_block, build_prefill_chunk, derive_backward, ModelConfig, OperatorGraph};
use crate::parallel::{apply_dp, apply_ep, apply_tp, build_program, validate_config, ChainNames, MemoryTags, ParallelismConfig, PipelineSpec, ProgramMode};
use crate::passes::{PassPipeline, PassSpec};
use crate::sched::{exposed_comm, ranks, simulate, SimOptions, Timeline};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Prefill,
    Decode,
    /// Prefill followed by one steady decode step.
    Serve,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Prefill => "prefill",
            Mode::Decode => "decode",
            Mode::Serve => "serve",
        }
    }
}

/// Where the block graph comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    /// Generated per microbatch; `batch` is the global batch.
    Config(ModelConfig),
    /// A ready block graph for one microbatch; its `block_multiplier` is the
    /// layer count.
    Graph(OperatorGraph),
}

/// Passes that must run before tensor and expert parallelism.
const PRE_PARALLEL: [&str; 2] = ["canonicalize", "quantize"];

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub model: ModelSource,
    pub parallel: ParallelismConfig,
    pub passes: Vec<PassSpec>,
    pub mode: Mode,
    /// Cached tokens seen by a decode step; defaults to the model's `seq_len`.
    pub context: Option<u64>,
    /// Prefill chunk length; `None` prefills the whole prompt at once.
    pub prefill_chunk: Option<u64>,
    pub memory: MemoryOptions,
    pub sim: SimOptions,
}

impl Workload {
    pub fn new(model: ModelConfig, parallel: ParallelismConfig, mode: Mode) -> Self {
        Workload {
            model: ModelSource::Config(model),
            parallel,
            passes: Vec::new(),
            mode,
            context: None,
            prefill_chunk: None,
            memory: MemoryOptions::default(),
            sim: SimOptions::default(),
        }
    }

    pub fn world(&self) -> u64 {
        self.parallel.world()
    }

    fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Sequences per microbatch on one data-parallel replica.
    pub fn microbatch_size(&self) -> Result<u64> {
        let ModelSource::Config(m) = &self.model else { return Ok(0) };
        let per = self.parallel.dp * self.parallel.microbatches;
        if per == 0 || m.batch % per != 0 {
            return Err(Error::config(format!(
                "batch {} is not divisible by dp x microbatches = {} x {}",
                m.batch, self.parallel.dp, self.parallel.microbatches
            )));
        }
        Ok(m.batch / per)
    }

    fn layers(&self) -> u64 {
        match &self.model {
            ModelSource::Config(m) => m.num_layers,
            ModelSource::Graph(g) => g.block_multiplier.max(1),
        }
    }
}

/// One simulated phase (a training step, a prefill chunk, a decode step).
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRun {
    pub name: String,
    pub graph: OperatorGraph,
    pub timeline: Timeline,
    pub model_flops: f64,
    pub memory: MemoryPeaks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: Report,
    /// Phases laid end to end.
    pub timeline: Timeline,
    pub phases: Vec<PhaseRun>,
}

struct Prepared {
    /// Per-rank graph that becomes the pipeline program.
    graph: OperatorGraph,
    tags: MemoryTags,
    /// FLOPs of one microbatch on the unsharded graph, before recompute.
    model_flops: u64,
    warnings: Vec<String>,
}

fn prepare(w: &Workload, block: &OperatorGraph) -> Result<Prepared> {
    let cfg = &w.parallel;
    let mut warnings = Vec::new();
    let (pre, post): (Vec<PassSpec>, Vec<PassSpec>) = w.passes.iter().cloned().partition(|s| PRE_PARALLEL.contains(&s.name.as_str()));
    let (g, _) = PassPipeline::from_specs(&pre)?.run(block)?;
    let joint = |g: &OperatorGraph| if w.training() && !g.is_joint() { derive_backward(g) } else { Ok(g.clone()) };
    let unsharded = joint(&g)?;
    let model_flops = unsharded.flops()?;

    let mut g = apply_tp(&g, cfg.tp, cfg.sp_enabled())?;
    g = apply_ep(&g, cfg.ep)?;
    let mut post: Vec<PassSpec> = post;
    if !w.training() {
        let before = post.len();
        post.retain(|s| s.name != "backward" && s.name != "recompute");
        if post.len() != before {
            warnings.push(format!("{} mode: backward and recompute passes skipped", w.mode.as_str()));
        }
    } else if !post.iter().any(|s| s.name == "backward") {
        post.insert(0, PassSpec { name: "backward".into(), params: BTreeMap::new() });
    }
    let (mut g, _) = PassPipeline::from_specs(&post)?.run(&g)?;
    let mut tags = MemoryTags::default();
    if w.training() {
        let r = apply_dp(&g, cfg.dp, cfg.dp_mode, cfg.bucket_bytes)?;
        g = r.graph;
        tags = r.tags;
        warnings.extend(r.warnings);
    }
    Ok(Prepared { graph: g, tags, model_flops, warnings })
}

/// In-flight microbatches held by pipeline stage `s` of `p` under 1F1B.
fn in_flight(s: u64, p: u64, m: u64, training: bool) -> u64 {
    if training {
        (p - s).min(m)
    } else {
        1
    }
}

fn stage_memory(w: &Workload, prep: &Prepared, layers: &[u64]) -> Result<MemoryPeaks> {
    let opts = MemoryOptions { tags: prep.tags, ..w.memory };
    let saved = if w.training() { saved_activation_bytes(&prep.graph) } else { 0 };
    let chain = ChainNames::default();
    let mut by_layers: BTreeMap<u64, crate::analysis::MemoryTimeline> = BTreeMap::new();
    let mut best = MemoryPeaks::default();
    for (s, &l) in layers.iter().enumerate() {
        if !by_layers.contains_key(&l) {
            let t = match expand_layers(&prep.graph, l, &chain) {
                Ok(g) => memory_timeline(&g, &opts)?,
                Err(Error::Config(_)) => {
                    // No layer chain: scale the single block's persistent bytes.
                    let mut t = memory_timeline(&prep.graph, &opts)?;
                    let persistent: u64 = t.persistent.values().sum();
                    t.max_allocated += persistent * (l - 1);
                    for (c, v) in t.persistent.clone() {
                        *t.at_peak.entry(c).or_insert(0) += v * (l - 1);
                    }
                    t
                }
                Err(e) => return Err(e),
            };
            by_layers.insert(l, t);
        }
        let t = &by_layers[&l];
        // Other in-flight microbatches keep their saved activations, and
        // in inference every microbatch keeps its own KV cache.
        let extra = (in_flight(s as u64, layers.len() as u64, w.parallel.microbatches, w.training()) - 1) * saved * l;
        let kv = if w.training() { 0 } else { (w.parallel.microbatches - 1) * t.persistent.get(&Component::KvCache).copied().unwrap_or(0) };
        let allocated = t.max_allocated + extra + kv;
        if s == 0 || allocated > best.max_allocated {
            let mut components = t.at_peak.clone();
            *components.entry(Component::Activations).or_insert(0) += extra;
            *components.entry(Component::KvCache).or_insert(0) += kv;
            components.retain(|_, v| *v > 0);
            best = MemoryPeaks { stage: s as u64, max_allocated: allocated, max_reserved: crate::analysis::reserved(allocated, &opts), components };
        }
    }
    Ok(best)
}

fn run_phase(w: &Workload, stack: &EngineStack, name: &str, block: &OperatorGraph, warnings: &mut Vec<String>) -> Result<PhaseRun> {
    let cfg = &w.parallel;
    let prep = prepare(w, block)?;
    warnings.extend(prep.warnings.iter().cloned());
    let layers = cfg.layers_per_stage(w.layers())?;
    let spec = PipelineSpec {
        graph: &prep.graph,
        cfg,
        layers: layers.clone(),
        training: w.training(),
        mode: ProgramMode::Representative,
        chain: ChainNames::default(),
    };
    let (program, _) = build_program(&spec)?;
    let pricer = GraphPricer::new(stack, &program)?;
    let timeline = simulate(&program, &pricer, &w.sim)?;
    let memory = stage_memory(w, &prep, &layers)?;
    let model_flops = prep.model_flops as f64 * w.layers() as f64 * cfg.microbatches as f64 * cfg.dp as f64;
    Ok(PhaseRun { name: name.into(), graph: prep.graph, timeline, model_flops, memory })
}

fn blocks(w: &Workload) -> Result<Vec<(String, OperatorGraph)>> {
    let m = match &w.model {
        ModelSource::Graph(g) => return Ok(alloc::vec![(w.mode.as_str().to_string(), g.clone())]),
        ModelSource::Config(m) => m,
    };
    let mb = ModelConfig { batch: w.microbatch_size()?, ..m.clone() };
    let prefill = |out: &mut Vec<(String, OperatorGraph)>| -> Result<()> {
        match w.prefill_chunk {
            None => out.push(("prefill".into(), build_block(&mb)?)),
            Some(c) if c == 0 => return Err(Error::config("prefill_chunk must be positive")),
            Some(c) => {
                let mut done = 0;
                while done < mb.seq_len {
                    let len = c.min(mb.seq_len - done);
                    out.push((format!("prefill.{}", done / c), build_prefill_chunk(&mb, len, done)?));
                    done += len;
                }
            }
        }
        Ok(())
    };
    let decode = |out: &mut Vec<(String, OperatorGraph)>| -> Result<()> {
        out.push(("decode".into(), build_decode_block(&mb, w.context.unwrap_or(mb.seq_len))?));
        Ok(())
    };
    let mut out = Vec::new();
    match w.mode {
        Mode::Train => out.push(("train".into(), build_block(&mb)?)),
        Mode::Prefill => prefill(&mut out)?,
        Mode::Decode => decode(&mut out)?,
        Mode::Serve => {
            prefill(&mut out)?;
            decode(&mut out)?;
        }
    }
    Ok(out)
}

/// Lays `parts` end to end on one time axis.
pub fn concat_timelines(parts: &[&Timeline]) -> Timeline {
    let mut out = Timeline { converged: true, ..Timeline::default() };
    let mut offset = 0.0;
    for t in parts {
        for e in &t.entries {
            let mut e = e.clone();
            e.start_ns += offset;
            e.end_ns += offset;
            out.entries.push(e);
        }
        offset += t.makespan_ns;
        out.iterations = out.iterations.max(t.iterations);
        out.converged &= t.converged;
    }
    out.makespan_ns = offset;
    out
}

fn merge(into: &mut Breakdown, b: Breakdown) {
    for r in b.rows {
        if !into.rows.contains(&r) {
            into.rows.push(r);
        }
    }
    for c in b.columns {
        if !into.columns.contains(&c) {
            into.columns.push(c);
        }
    }
    for (r, cols) in b.cells {
        let row = into.cells.entry(r).or_default();
        for (c, v) in cols {
            *row.entry(c).or_insert(0.0) += v;
        }
    }
}

/// Runs the workload end to end. Only the first data- and tensor-parallel
/// replica of each pipeline stage is simulated; energy is scaled to the
/// whole world.
pub fn run(w: &Workload, stack: &EngineStack) -> Result<RunOutput> {
    let world = w.world();
    validate_config(&w.parallel, world)?;
    if let ModelSource::Config(m) = &w.model {
        m.validate()?;
    }
    let mut warnings = Vec::new();
    let mut phases = Vec::new();
    for (name, block) in blocks(w)? {
        phases.push(run_phase(w, stack, &name, &block, &mut warnings)?);
    }
    let timeline = concat_timelines(&phases.iter().map(|p| &p.timeline).collect::<Vec<_>>());
    let hw = &stack.hw;
    let model_flops: f64 = phases.iter().map(|p| p.model_flops).sum();
    let precision = model_precision(&phases[0].graph)?;

    let rank0 = ranks(&timeline).into_iter().next().unwrap_or(0);
    let map = CategoryMap::standard();
    let mut bd = Breakdown::default();
    for p in &phases {
        let b = breakdown(&p.timeline, &map, Some(rank0));
        let b = match w.mode {
            Mode::Train => b,
            _ => b.relabel("F", if p.name == "decode" { "decode" } else { "prefill" }),
        };
        merge(&mut bd, b);
    }
    bd.columns.retain(|c| bd.cells.values().any(|r| r.contains_key(c)) || (w.mode == Mode::Train && (c == "F" || c == "B")));

    let simulated = ranks(&timeline).len().max(1) as f64;
    let mut memory = MemoryPeaks::default();
    for p in &phases {
        if p.memory.max_allocated >= memory.max_allocated {
            memory = p.memory.clone();
        }
    }
    let sum = |pred: &dyn Fn(&PhaseRun) -> bool| phases.iter().filter(|p| pred(p)).map(|p| p.timeline.makespan_ns).sum::<f64>();
    let ttft = matches!(w.mode, Mode::Prefill | Mode::Serve).then(|| sum(&|p| p.name.starts_with("prefill")));
    let tpot = matches!(w.mode, Mode::Decode | Mode::Serve).then(|| sum(&|p| p.name == "decode"));
    let mut report = Report {
        mode: w.mode.as_str().into(),
        world,
        model_flops,
        mfu: mfu(model_flops, timeline.makespan_ns, hw, precision, world)?,
        step_time_us: crate::analysis::us(timeline.makespan_ns),
        ttft_us: ttft.map(crate::analysis::us),
        tpot_us: tpot.map(crate::analysis::us),
        exposed_comm_us: crate::analysis::us(ranks(&timeline).into_iter().map(|r| exposed_comm(&timeline, r)).fold(0.0, f64::max)),
        memory,
        energy_j: energy_estimate(&timeline, hw) * world as f64 / simulated,
        breakdown_rank: rank0,
        warnings,
        ..Report::default()
    };
    report.set_breakdown(&bd);
    report.set_operators(&operator_table(&timeline));
    Ok(RunOutput { report, timeline, phases })
}
