//! Run configuration: a flat TOML file with every key optional.
//!
//! ```toml
//! mode = "1to1"            # or "2to1"
//! csnr_db = 15.0           # per-channel power target 10^(csnr_db/10)
//! epsilon = 0.01
//! sweep_epsilons = [0.2, 0.05, 0.01, 0.002]
//! restarts = 4
//! seed = 1
//! ```
//!
//! Unknown keys are rejected. Missing keys take per-mode defaults; the
//! resolved configuration can be written back with [`RunConfig::to_toml`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealer::AnnealSchedule;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::toml_error;
use crate::system::{GridSpec, Mode, SystemConfig};

/// Every key a config file may set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<String>,
    pub source_variance: Option<f64>,
    pub noise_variance_1: Option<f64>,
    pub noise_variance_2: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub csnr_db: Option<f64>,
    pub source_points: Option<usize>,
    pub source_half_range: Option<f64>,
    pub channel_points: Option<usize>,
    pub channel_margin_sd: Option<f64>,
    /// `"parallel"` or `"sequential"`.
    pub execution: Option<String>,
    pub t_init_scale: Option<f64>,
    pub alpha: Option<f64>,
    pub t_min_ratio: Option<f64>,
    pub max_outer: Option<usize>,
    pub inner_tol: Option<f64>,
    pub inner_max: Option<usize>,
    pub restarts: Option<usize>,
    pub models: Option<usize>,
    pub init_spread: Option<f64>,
    pub refine_tol: Option<f64>,
    pub refine_max_rounds: Option<usize>,
    pub power_tol: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sweep_epsilons: Option<Vec<f64>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ConfigFile::parse(&text)
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub csnr_db: Option<f64>,
    pub grids: GridSpec,
    pub schedule: AnnealSchedule,
    pub seed: u64,
    pub out: PathBuf,
    pub sweep_epsilons: Vec<f64>,
}

pub const DEFAULT_SWEEP: [f64; 4] = [0.2, 0.05, 0.01, 0.002];

fn parse_exec(s: &str) -> Result<Exec> {
    match s {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        _ => Err(Error::Config(format!("execution must be \"parallel\" or \"sequential\", got {s:?}"))),
    }
}

impl RunConfig {
    /// Resolves `file` with command-line overrides; `mode` and `seed` flags win over the file.
    pub fn resolve(file: ConfigFile, mode: Option<Mode>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let mode = match (mode, file.mode.as_deref()) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse()?,
            (None, None) => Mode::OneToOne,
        };
        let sd = SystemConfig::default();
        let power_target = file.csnr_db.map(|c| 10f64.powf(c / 10.0));
        let system = SystemConfig {
            source_variance: file.source_variance.unwrap_or(sd.source_variance),
            noise_variance_1: file.noise_variance_1.unwrap_or(sd.noise_variance_1),
            noise_variance_2: file.noise_variance_2.unwrap_or(sd.noise_variance_2),
            epsilon: file.epsilon.unwrap_or(sd.epsilon),
            lambda: file.lambda.unwrap_or(sd.lambda),
            mode,
            power_target,
        };
        system.validate()?;
        let gd = GridSpec::for_mode(mode);
        let grids = GridSpec {
            source_points: file.source_points.unwrap_or(gd.source_points),
            source_half_range: file.source_half_range.unwrap_or(gd.source_half_range),
            channel_points: file.channel_points.unwrap_or(gd.channel_points),
            channel_margin_sd: file.channel_margin_sd.unwrap_or(gd.channel_margin_sd),
            exec: file.execution.as_deref().map(parse_exec).transpose()?.unwrap_or(gd.exec),
        };
        grids.source_grid(system.source_variance)?;
        if grids.channel_points < 2 || !(grids.channel_margin_sd > 0.0) {
            return Err(Error::Config("channel grids need >= 2 points and a positive margin".into()));
        }
        let s = AnnealSchedule::for_mode(mode);
        let schedule = AnnealSchedule {
            t_init_scale: file.t_init_scale.unwrap_or(s.t_init_scale),
            alpha: file.alpha.unwrap_or(s.alpha),
            t_min_ratio: file.t_min_ratio.unwrap_or(s.t_min_ratio),
            max_outer: file.max_outer.unwrap_or(s.max_outer),
            inner_tol: file.inner_tol.unwrap_or(s.inner_tol),
            inner_max: file.inner_max.unwrap_or(s.inner_max),
            restarts: file.restarts.unwrap_or(s.restarts),
            models: file.models.unwrap_or(s.models),
            init_spread: file.init_spread.unwrap_or(s.init_spread),
            refine_tol: file.refine_tol.unwrap_or(s.refine_tol),
            refine_max_rounds: file.refine_max_rounds.unwrap_or(s.refine_max_rounds),
            power_tol: file.power_tol.unwrap_or(s.power_tol),
        };
        schedule.validate()?;
        let sweep_epsilons = file.sweep_epsilons.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
        if sweep_epsilons.is_empty() {
            return Err(Error::Config("sweep_epsilons must not be empty".into()));
        }
        for &e in &sweep_epsilons {
            system.clone().with_epsilon(e).validate()?;
        }
        Ok(RunConfig {
            system,
            csnr_db: file.csnr_db,
            grids,
            schedule,
            seed: seed.or(file.seed).unwrap_or(1),
            out: out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            sweep_epsilons,
        })
    }

    /// The resolved configuration as a config file with every key set except
    /// `out`, so runs echoed into different directories are identical.
    pub fn to_file(&self) -> ConfigFile {
        let s = &self.schedule;
        ConfigFile {
            mode: Some(self.system.mode.label().to_string()),
            source_variance: Some(self.system.source_variance),
            noise_variance_1: Some(self.system.noise_variance_1),
            noise_variance_2: Some(self.system.noise_variance_2),
            epsilon: Some(self.system.epsilon),
            lambda: Some(self.system.lambda),
            csnr_db: self.csnr_db,
            source_points: Some(self.grids.source_points),
            source_half_range: Some(self.grids.source_half_range),
            channel_points: Some(self.grids.channel_points),
            channel_margin_sd: Some(self.grids.channel_margin_sd),
            execution: Some(self.grids.exec.label().to_string()),
            t_init_scale: Some(s.t_init_scale),
            alpha: Some(s.alpha),
            t_min_ratio: Some(s.t_min_ratio),
            max_outer: Some(s.max_outer),
            inner_tol: Some(s.inner_tol),
            inner_max: Some(s.inner_max),
            restarts: Some(s.restarts),
            models: Some(s.models),
            init_spread: Some(s.init_spread),
            refine_tol: Some(s.refine_tol),
            refine_max_rounds: Some(s.refine_max_rounds),
            power_tol: Some(s.power_tol),
            seed: Some(self.seed),
            out: None,
            sweep_epsilons: Some(self.sweep_epsilons.clone()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }
}
