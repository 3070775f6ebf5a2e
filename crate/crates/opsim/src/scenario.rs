//! Scenario files: what to simulate, on which hardware, with which engines.
//!
//! ```toml
//! version = "charon-scenario/1"
//! mode = "train"
//! hardware = "h100x16.toml"
//! passes = "passes.toml"
//!
//! [model]
//! hidden_size = 512
//! num_heads = 8
//! ffn_hidden = 1408
//! num_layers = 4
//! batch = 16
//! seq_len = 256
//!
//! [parallelism]
//! tp = 2
//! pp = 2
//! dp = 2
//! microbatches = 4
//! ```
//!
//! `[model]` holds either model dimensions or `ir = "block.json"`. A
//! top-level `program = "prog.json"` simulates a hand-written multi-rank
//! program instead of a model. Relative paths resolve against the
//! scenario's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use opsim_core::analysis::{breakdown, energy_estimate, operator_table, us, CategoryMap, MemoryOptions, Report};
use opsim_core::engines::{parse_order, CollectiveAlgo, EngineKind, EngineStack, ForestParams, GraphPricer, HardwareSpec, Predictor};
use opsim_core::graph::{ModelConfig, MoeConfig, Precision};
use opsim_core::parallel::ParallelismConfig;
use opsim_core::run::{run, Mode, ModelSource, Workload};
use opsim_core::sched::{exposed_comm, ranks, simulate, OverlapModel, Program, SimOptions, SlowdownFactors, Timeline};

use crate::format::{load_hw, load_ir, load_passes, load_profile_db, load_program, load_toml, resolve, SCENARIO_VERSION};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    mode: Mode,
    hardware: PathBuf,
    passes: Option<PathBuf>,
    seed: Option<u64>,
    model: Option<ModelSection>,
    program: Option<PathBuf>,
    #[serde(default)]
    parallelism: ParallelismConfig,
    #[serde(default)]
    engines: EngineSection,
    #[serde(default)]
    simulation: SimSection,
    #[serde(default)]
    memory: MemorySection,
    #[serde(default)]
    outputs: Outputs,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    ir: Option<PathBuf>,
    hidden_size: Option<u64>,
    num_heads: Option<u64>,
    num_kv_heads: Option<u64>,
    head_dim: Option<u64>,
    ffn_hidden: Option<u64>,
    num_layers: Option<u64>,
    vocab_size: Option<u64>,
    moe: Option<MoeConfig>,
    precision: Option<Precision>,
    batch: Option<u64>,
    seq_len: Option<u64>,
}

impl ModelSection {
    fn config(&self) -> std::result::Result<ModelConfig, String> {
        let need = |v: Option<u64>, name: &str| v.ok_or_else(|| format!("[model] needs `{name}` (or `ir`)"));
        let mut c = ModelConfig::dense(
            need(self.hidden_size, "hidden_size")?,
            need(self.num_heads, "num_heads")?,
            need(self.ffn_hidden, "ffn_hidden")?,
            need(self.num_layers, "num_layers")?,
            need(self.batch, "batch")?,
            need(self.seq_len, "seq_len")?,
        );
        if let Some(v) = self.num_kv_heads {
            c.num_kv_heads = v;
        }
        if let Some(v) = self.head_dim {
            c.head_dim = v;
        }
        if let Some(v) = self.vocab_size {
            c.vocab_size = v;
        }
        if let Some(p) = self.precision {
            c.precision = p;
        }
        c.moe = self.moe.clone();
        Ok(c)
    }

    fn has_dimensions(&self) -> bool {
        [self.hidden_size, self.num_heads, self.num_kv_heads, self.head_dim, self.ffn_hidden, self.num_layers, self.vocab_size, self.batch, self.seq_len]
            .iter()
            .any(Option::is_some)
            || self.moe.is_some()
            || self.precision.is_some()
    }
}

/// Engine order as `"profile,predict,analytical"` or a list.
#[derive(Deserialize)]
#[serde(untagged)]
enum Order {
    Text(String),
    List(Vec<String>),
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineSection {
    order: Option<Order>,
    profile_db: Option<PathBuf>,
    #[serde(default)]
    algo: CollectiveAlgo,
}

fn one() -> f64 {
    1.0
}

fn ten() -> usize {
    10
}

fn tolerance() -> f64 {
    1e-3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    #[serde(default)]
    overlap: OverlapModel,
    #[serde(default = "one")]
    compute_slowdown: f64,
    #[serde(default = "one")]
    comm_slowdown: f64,
    #[serde(default = "one")]
    comm_comm_slowdown: f64,
    #[serde(default = "ten")]
    max_iterations: usize,
    #[serde(default = "tolerance")]
    tolerance_ns: f64,
    context: Option<u64>,
    prefill_chunk: Option<u64>,
}

impl Default for SimSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MemorySection {
    #[serde(default = "eight")]
    optimizer_bytes_per_param: f64,
    #[serde(default = "fragmentation")]
    fragmentation: f64,
    #[serde(default)]
    comm_buffer_bytes: u64,
}

fn eight() -> f64 {
    8.0
}

fn fragmentation() -> f64 {
    1.05
}

impl Default for MemorySection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// What a scenario simulates.
#[derive(Clone, Debug)]
pub enum Target {
    Workload(Box<Workload>),
    Program(Box<Program>),
}

/// A loaded scenario with every referenced file read and checked.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub path: PathBuf,
    pub hardware: HardwareSpec,
    pub target: Target,
    pub sim: SimOptions,
    pub order: Vec<EngineKind>,
    pub profile_db: Option<PathBuf>,
    pub algo: CollectiveAlgo,
    pub seed: u64,
    pub outputs: Outputs,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let f: ScenarioFile = load_toml(path, SCENARIO_VERSION)?;
        let bad = |msg: String| Error::parse(path, msg);
        let hardware = load_hw(&resolve(path, &f.hardware))?;
        let sim = SimOptions {
            overlap: f.simulation.overlap,
            factors: SlowdownFactors {
                compute: f.simulation.compute_slowdown,
                comm: f.simulation.comm_slowdown,
                comm_comm: f.simulation.comm_comm_slowdown,
            },
            max_iterations: f.simulation.max_iterations,
            tolerance_ns: f.simulation.tolerance_ns,
        };
        let target = match (&f.model, &f.program) {
            (Some(_), Some(_)) => return Err(bad("`[model]` and `program` are mutually exclusive".into())),
            (None, None) => return Err(bad("needs a `[model]` table or a `program` path".into())),
            (None, Some(p)) => Target::Program(Box::new(load_program(&resolve(path, p))?)),
            (Some(m), None) => {
                let model = match &m.ir {
                    Some(_) if m.has_dimensions() => return Err(bad("`[model]` takes either `ir` or dimensions, not both".into())),
                    Some(ir) => ModelSource::Graph(load_ir(&resolve(path, ir))?),
                    None => ModelSource::Config(m.config().map_err(bad)?),
                };
                let training = f.mode == Mode::Train;
                if training && f.simulation.context.is_some() {
                    return Err(bad("`simulation.context` applies to decode and serve modes".into()));
                }
                if training && f.simulation.prefill_chunk.is_some() {
                    return Err(bad("`simulation.prefill_chunk` applies to inference modes".into()));
                }
                let passes = match &f.passes {
                    Some(p) => load_passes(&resolve(path, p))?,
                    None => Vec::new(),
                };
                Target::Workload(Box::new(Workload {
                    model,
                    parallel: f.parallelism.clone(),
                    passes,
                    mode: f.mode,
                    context: f.simulation.context,
                    prefill_chunk: f.simulation.prefill_chunk,
                    memory: MemoryOptions {
                        optimizer_bytes_per_param: f.memory.optimizer_bytes_per_param,
                        fragmentation: f.memory.fragmentation,
                        comm_buffer_bytes: f.memory.comm_buffer_bytes,
                        ..MemoryOptions::default()
                    },
                    sim,
                }))
            }
        };
        let order = match &f.engines.order {
            None => vec![EngineKind::Analytical],
            Some(Order::Text(s)) => parse_order(s).map_err(|e| bad(e.to_string()))?,
            Some(Order::List(v)) => parse_order(&v.join(",")).map_err(|e| bad(e.to_string()))?,
        };
        let profile_db = f.engines.profile_db.as_ref().map(|p| resolve(path, p));
        let outputs = Outputs { report: f.outputs.report.map(|p| resolve(path, &p)), trace: f.outputs.trace.map(|p| resolve(path, &p)) };
        Ok(Scenario {
            path: path.to_path_buf(),
            hardware,
            target,
            sim,
            order,
            profile_db,
            algo: f.engines.algo,
            seed: f.seed.unwrap_or(DEFAULT_SEED),
            outputs,
        })
    }

    pub fn set_overlap(&mut self, overlap: OverlapModel) {
        self.sim.overlap = overlap;
        if let Target::Workload(w) = &mut self.target {
            w.sim.overlap = overlap;
        }
    }

    /// The engine stack; the profile database is loaded and the predictor
    /// trained only when the order asks for them.
    pub fn stack(&self) -> Result<EngineStack> {
        let mut stack = EngineStack::analytical(self.hardware.clone()).with_order(self.order.clone());
        stack.algo = self.algo;
        let wants = |k| self.order.contains(&k);
        if wants(EngineKind::Profile) || wants(EngineKind::Prediction) {
            let path = self
                .profile_db
                .as_ref()
                .ok_or_else(|| Error::parse(&self.path, "the profile and prediction engines need `engines.profile_db`"))?;
            let db = load_profile_db(path)?;
            if wants(EngineKind::Prediction) {
                let params = ForestParams { seed: self.seed, ..ForestParams::default() };
                let (p, skipped) = Predictor::train(&db, &self.hardware.device_id, &params).map_err(|e| Error::parse(path, e))?;
                for k in skipped {
                    log::warn!("too few records to train a predictor for `{k}`");
                }
                stack.predictor = Some(p);
            }
            if wants(EngineKind::Profile) {
                stack.profile = Some(db);
            }
        }
        Ok(stack)
    }

    /// Simulates the scenario.
    pub fn run(&self, stack: &EngineStack) -> Result<(Report, Timeline)> {
        match &self.target {
            Target::Workload(w) => {
                let out = run(w, stack)?;
                Ok((out.report, out.timeline))
            }
            Target::Program(p) => run_program(p, stack, &self.sim),
        }
    }
}

/// Simulates a hand-written program. Its report carries no model FLOPs.
pub fn run_program(p: &Program, stack: &EngineStack, opts: &SimOptions) -> Result<(Report, Timeline)> {
    let pricer = GraphPricer::new(stack, p)?;
    let t = simulate(p, &pricer, opts)?;
    let rank0 = ranks(&t).into_iter().next().unwrap_or(0);
    let mut r = Report {
        mode: "program".into(),
        world: p.ranks.len() as u64,
        step_time_us: us(t.makespan_ns),
        exposed_comm_us: us(ranks(&t).into_iter().map(|k| exposed_comm(&t, k)).fold(0.0, f64::max)),
        energy_j: energy_estimate(&t, &stack.hw),
        breakdown_rank: rank0,
        ..Report::default()
    };
    r.set_breakdown(&breakdown(&t, &CategoryMap::standard(), Some(rank0)));
    r.set_operators(&operator_table(&t));
    Ok((r, t))
}
