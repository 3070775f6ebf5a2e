//! The `opsim` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

use opsim_core::engines::{calibrate_links, parse_order, roofline_records, CollectiveAlgo, CollectiveKind, LinkFit, LinkSample, TierKind};
use opsim_core::sched::OverlapModel;

use crate::format::{load_hw, profile_csv, to_toml, HW_VERSION};
use crate::output::{breakdown_csv, emit, report_json, trace_json};
use crate::scenario::Scenario;
use crate::search::{frontier_json, search, table_csv, Space};
use crate::sweep::{load_sweep, random_sweep, SweepOp};
use crate::{exit, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "opsim", version, about = "Operator-level performance simulator for distributed LLM training and inference")]
pub struct Cli {
    /// Seed for predictor training and random sweeps (overrides the scenario's).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Engine order, e.g. `profile,predict,analytical`.
    #[arg(long, global = true)]
    pub engines: Option<String>,
    /// Overlap model for concurrent streams.
    #[arg(long, global = true, value_enum)]
    pub overlap: Option<Overlap>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Overlap {
    Ratio,
    Bandwidth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Algo {
    Ring,
    Tree,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Tier {
    Ring,
    Switch,
    Mesh,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write its report.
    Simulate {
        scenario: PathBuf,
        /// Report path; defaults to the scenario's `outputs.report`, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a scenario and write a Chrome trace.
    Trace {
        scenario: PathBuf,
        /// Trace path; defaults to the scenario's `outputs.trace`, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a search space and write the result table and frontier.
    Search {
        space: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        frontier: Option<PathBuf>,
    },
    /// Print the time breakdown of a scenario as CSV.
    Breakdown {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a roofline-derived profile database for a shape sweep.
    #[command(group(ArgGroup::new("shapes").required(true).args(["sweep", "random"])))]
    GenProfileDb {
        #[arg(long)]
        hw: PathBuf,
        /// TOML list of `[[op]]` shapes.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Number of random matmul, rmsnorm and attention shapes.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit link latency and bandwidth to measured collectives.
    Calibrate {
        /// CSV with columns `p,bytes,seconds`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum, default_value = "all-reduce")]
        kind: Kind,
        #[arg(long, value_enum, default_value = "ring")]
        algo: Algo,
        #[arg(long, value_enum, default_value = "ring")]
        tier: Tier,
        /// Hardware file whose tiers at `--level` take the fitted values.
        #[arg(long)]
        hw: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        level: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, rec| writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args()))
        .try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_scenario(cli: &Cli, path: &Path) -> Result<Scenario> {
    let mut s = Scenario::load(path)?;
    apply_overrides(cli, &mut s)?;
    Ok(s)
}

fn apply_overrides(cli: &Cli, s: &mut Scenario) -> Result<()> {
    if let Some(order) = &cli.engines {
        s.order = parse_order(order)?;
    }
    if let Some(o) = cli.overlap {
        s.set_overlap(match o {
            Overlap::Ratio => OverlapModel::Ratio,
            Overlap::Bandwidth => OverlapModel::Bandwidth,
        });
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { scenario, out } => {
            let s = load_scenario(cli, scenario)?;
            let (report, _) = s.run(&s.stack()?)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            emit(out.as_deref().or(s.outputs.report.as_deref()), &report_json(&report)?)
        }
        Command::Trace { scenario, out } => {
            let s = load_scenario(cli, scenario)?;
            let (_, timeline) = s.run(&s.stack()?)?;
            emit(out.as_deref().or(s.outputs.trace.as_deref()), &trace_json(&timeline)?)
        }
        Command::Breakdown { scenario, out } => {
            let s = load_scenario(cli, scenario)?;
            let (report, _) = s.run(&s.stack()?)?;
            emit(out.as_deref(), &breakdown_csv(&report)?)
        }
        Command::Search { space, table, frontier } => {
            let mut sp = Space::load(space)?;
            apply_overrides(cli, &mut sp.scenario)?;
            sp.base.sim.overlap = sp.scenario.sim.overlap;
            let stack = sp.scenario.stack()?;
            let r = search(&sp, &stack)?;
            let table = table.as_deref().or(sp.outputs.table.as_deref());
            emit(table, &table_csv(&r)?)?;
            if let Some(f) = frontier.as_deref().or(sp.outputs.frontier.as_deref()) {
                emit(Some(f), &frontier_json(&r, &sp.slo)?)?;
            }
            Ok(())
        }
        Command::GenProfileDb { hw, sweep, random, out } => {
            let spec = load_hw(hw)?;
            let ops: Vec<SweepOp> = match (sweep, random) {
                (Some(p), _) => load_sweep(p)?,
                (None, Some(n)) => random_sweep(*n, cli.seed.unwrap_or(crate::scenario::DEFAULT_SEED)),
                (None, None) => unreachable!("clap requires one of --sweep and --random"),
            };
            let nodes = ops.iter().map(SweepOp::node).collect::<Result<Vec<_>>>()?;
            let (records, dups) = roofline_records(&spec, &nodes)?;
            if dups > 0 {
                log::warn!("dropped {dups} duplicate sweep entr{}", if dups == 1 { "y" } else { "ies" });
            }
            log::info!("{} records for `{}`", records.len(), spec.device_id);
            emit(out.as_deref(), &profile_csv(&records)?)
        }
        Command::Calibrate { samples, kind, algo, tier, hw, level, out } => {
            let rows: Vec<LinkSample> = crate::format::read_csv(samples)?;
            let kind = match kind {
                Kind::AllReduce => CollectiveKind::AllReduce,
                Kind::AllGather => CollectiveKind::AllGather,
                Kind::ReduceScatter => CollectiveKind::ReduceScatter,
                Kind::AllToAll => CollectiveKind::AllToAll,
            };
            let algo = match algo {
                Algo::Ring => CollectiveAlgo::Ring,
                Algo::Tree => CollectiveAlgo::Tree,
            };
            let tier = match tier {
                Tier::Ring => TierKind::Ring,
                Tier::Switch => TierKind::Switch,
                Tier::Mesh => TierKind::Mesh,
            };
            let fit = calibrate_links(&rows, kind, algo, tier).map_err(|e| Error::parse(samples, e))?;
            log::info!("alpha {:.3e} s, bandwidth {:.3e} B/s, rms residual {:.3e} s", fit.alpha, fit.bandwidth, fit.rms_residual);
            match hw {
                None => emit(out.as_deref(), &fit_json(&fit)?),
                Some(h) => {
                    let mut spec = load_hw(h)?;
                    let mut hit = 0;
                    for t in spec.topology.iter_mut().filter(|t| t.level == *level) {
                        t.alpha = fit.alpha;
                        t.bandwidth = fit.bandwidth;
                        hit += 1;
                    }
                    if hit == 0 {
                        return Err(Error::parse(h, format!("no topology tier at level {level}")));
                    }
                    emit(out.as_deref(), &to_toml(HW_VERSION, &spec)?)
                }
            }
        }
    }
}

fn fit_json(fit: &LinkFit) -> Result<String> {
    let mut s = serde_json::to_string_pretty(fit).map_err(|e| Error::config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
