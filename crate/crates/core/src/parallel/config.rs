use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpMode {
    #[default]
    Ddp,
    Zero1,
    Zero2,
    Zero3,
    Fsdp,
}

impl DpMode {
    pub const ALL: [DpMode; 5] = [DpMode::Ddp, DpMode::Zero1, DpMode::Zero2, DpMode::Zero3, DpMode::Fsdp];

    pub fn as_str(self) -> &'static str {
        match self {
            DpMode::Ddp => "ddp",
            DpMode::Zero1 => "zero1",
            DpMode::Zero2 => "zero2",
            DpMode::Zero3 => "zero3",
            DpMode::Fsdp => "fsdp",
        }
    }

    /// Parameters are sharded and gathered on demand.
    pub fn shards_params(self) -> bool {
        matches!(self, DpMode::Zero3 | DpMode::Fsdp)
    }
}

impl fmt::Display for DpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpSchedule {
    #[default]
    OneFOneB,
    Dualpipe,
}

impl PpSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            PpSchedule::OneFOneB => "one_f_one_b",
            PpSchedule::Dualpipe => "dualpipe",
        }
    }
}

impl fmt::Display for PpSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn one() -> u64 {
    1
}

fn default_order() -> String {
    "tp,dp,pp".into()
}

fn default_bucket() -> u64 {
    25 * crate::units::MIB
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParallelismConfig {
    #[serde(default = "one")]
    pub tp: u64,
    #[serde(default = "one")]
    pub sp: u64,
    #[serde(default = "one")]
    pub ep: u64,
    #[serde(default = "one")]
    pub pp: u64,
    #[serde(default = "one")]
    pub dp: u64,
    #[serde(default)]
    pub dp_mode: DpMode,
    #[serde(default)]
    pub pp_schedule: PpSchedule,
    #[serde(default = "one")]
    pub microbatches: u64,
    /// Zero means `tp * pp * dp`.
    #[serde(default)]
    pub world_size: u64,
    /// Axis order from innermost (adjacent ranks) to outermost.
    #[serde(default = "default_order")]
    pub rank_order: String,
    /// Layers per pipeline stage; empty splits evenly with the remainder on early stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_layers: Vec<u64>,
    /// Data-parallel gradient bucket size in bytes.
    #[serde(default = "default_bucket")]
    pub bucket_bytes: u64,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        ParallelismConfig {
            tp: 1,
            sp: 1,
            ep: 1,
            pp: 1,
            dp: 1,
            dp_mode: DpMode::Ddp,
            pp_schedule: PpSchedule::OneFOneB,
            microbatches: 1,
            world_size: 0,
            rank_order: default_order(),
            stage_layers: Vec::new(),
            bucket_bytes: default_bucket(),
        }
    }
}

/// Parallel axis of the rank grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Tp,
    Dp,
    Pp,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Tp => "tp",
            Axis::Dp => "dp",
            Axis::Pp => "pp",
        }
    }
}

/// Position of a rank on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coords {
    pub tp: u64,
    pub dp: u64,
    pub pp: u64,
}

impl ParallelismConfig {
    pub fn new(tp: u64, pp: u64, dp: u64) -> Self {
        ParallelismConfig { tp, pp, dp, world_size: tp * pp * dp, ..Default::default() }
    }

    pub fn world(&self) -> u64 {
        if self.world_size == 0 {
            self.tp * self.pp * self.dp
        } else {
            self.world_size
        }
    }

    pub fn sp_enabled(&self) -> bool {
        self.sp > 1
    }

    fn order(&self) -> Result<[Axis; 3]> {
        let mut axes = Vec::new();
        for part in self.rank_order.split(',').map(str::trim) {
            axes.push(match part {
                "tp" => Axis::Tp,
                "dp" => Axis::Dp,
                "pp" => Axis::Pp,
                other => return Err(Error::config(format!("unknown axis `{other}` in rank_order"))),
            });
        }
        let mut sorted = axes.clone();
        sorted.sort();
        if sorted != [Axis::Tp, Axis::Dp, Axis::Pp] {
            return Err(Error::config(format!("rank_order `{}` must list tp, dp and pp once each", self.rank_order)));
        }
        Ok([axes[0], axes[1], axes[2]])
    }

    fn size(&self, a: Axis) -> u64 {
        match a {
            Axis::Tp => self.tp,
            Axis::Dp => self.dp,
            Axis::Pp => self.pp,
        }
    }

    pub fn rank_of(&self, c: Coords) -> Result<u64> {
        let order = self.order()?;
        let mut rank = 0;
        let mut stride = 1;
        for a in order {
            let v = match a {
                Axis::Tp => c.tp,
                Axis::Dp => c.dp,
                Axis::Pp => c.pp,
            };
            rank += v * stride;
            stride *= self.size(a);
        }
        Ok(rank)
    }

    pub fn coords(&self, rank: u64) -> Result<Coords> {
        let order = self.order()?;
        let mut c = Coords { tp: 0, dp: 0, pp: 0 };
        let mut rest = rank;
        for a in order {
            let s = self.size(a);
            let v = rest % s;
            rest /= s;
            match a {
                Axis::Tp => c.tp = v,
                Axis::Dp => c.dp = v,
                Axis::Pp => c.pp = v,
            }
        }
        Ok(c)
    }

    /// Ranks sharing every coordinate of `rank` except along `axis`, ordered by that coordinate.
    pub fn group(&self, rank: u64, axis: Axis) -> Result<Vec<u64>> {
        let c = self.coords(rank)?;
        (0..self.size(axis))
            .map(|v| {
                let mut d = c;
                match axis {
                    Axis::Tp => d.tp = v,
                    Axis::Dp => d.dp = v,
                    Axis::Pp => d.pp = v,
                }
                self.rank_of(d)
            })
            .collect()
    }

    /// Expert-parallel group: the `ep` consecutive data-parallel ranks containing `rank`.
    pub fn ep_group(&self, rank: u64) -> Result<Vec<u64>> {
        let c = self.coords(rank)?;
        let base = c.dp / self.ep * self.ep;
        (base..base + self.ep).map(|dp| self.rank_of(Coords { dp, ..c })).collect()
    }

    /// Layers hosted by each pipeline stage.
    pub fn layers_per_stage(&self, layers: u64) -> Result<Vec<u64>> {
        if !self.stage_layers.is_empty() {
            if self.stage_layers.len() as u64 != self.pp {
                return Err(Error::config(format!(
                    "stage_layers lists {} stages but pp = {}",
                    self.stage_layers.len(),
                    self.pp
                )));
            }
            if self.stage_layers.iter().sum::<u64>() != layers || self.stage_layers.contains(&0) {
                return Err(Error::config(format!("stage_layers must be positive and sum to {layers}")));
            }
            return Ok(self.stage_layers.clone());
        }
        if layers < self.pp {
            return Err(Error::config(format!("{layers} layers cannot fill {} pipeline stages", self.pp)));
        }
        let base = layers / self.pp;
        let extra = layers % self.pp;
        Ok((0..self.pp).map(|s| base + u64::from(s < extra)).collect())
    }
}

/// Checks sizes, divisibility and `tp * pp * dp == world`, reporting every
/// violation at once.
pub fn validate_config(cfg: &ParallelismConfig, world: u64) -> Result<()> {
    let mut diags: Vec<String> = Vec::new();
    for (name, v) in [("tp", cfg.tp), ("sp", cfg.sp), ("ep", cfg.ep), ("pp", cfg.pp), ("dp", cfg.dp), ("microbatches", cfg.microbatches)] {
        if v == 0 {
            diags.push(format!("{name} must be positive"));
        }
    }
    if !diags.is_empty() {
        return Err(Error::config(diags.join("; ")));
    }
    let product = cfg.tp * cfg.pp * cfg.dp;
    if product != world {
        diags.push(format!("tp*pp*dp = {}*{}*{} = {product} != world size {world}", cfg.tp, cfg.pp, cfg.dp));
    }
    if cfg.world_size != 0 && cfg.world_size != world {
        diags.push(format!("world_size {} != {world}", cfg.world_size));
    }
    if cfg.sp != 1 && cfg.sp != cfg.tp {
        diags.push(format!("sp must be 1 or tp ({}), got {}", cfg.tp, cfg.sp));
    }
    if cfg.ep > cfg.dp || cfg.dp % cfg.ep != 0 {
        diags.push(format!("ep ({}) must divide dp ({})", cfg.ep, cfg.dp));
    }
    match cfg.pp_schedule {
        PpSchedule::OneFOneB => {
            if cfg.microbatches < cfg.pp {
                diags.push(format!("one_f_one_b needs microbatches ({}) >= pp ({})", cfg.microbatches, cfg.pp));
            }
        }
        PpSchedule::Dualpipe => {
            if cfg.pp % 2 != 0 {
                diags.push(format!("dualpipe needs an even pp, got {}", cfg.pp));
            }
            if cfg.microbatches % 2 != 0 || cfg.microbatches < 2 {
                diags.push(format!("dualpipe needs an even number of microbatches, got {}", cfg.microbatches));
            }
        }
    }
    if cfg.bucket_bytes == 0 {
        diags.push("bucket_bytes must be positive".to_string());
    }
    if let Err(e) = cfg.order() {
        diags.push(e.to_string());
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::config(diags.join("; ")))
    }
}
