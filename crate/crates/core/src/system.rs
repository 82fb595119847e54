//! System configuration, scalar encoder mappings, and the distortion / power /
//! Lagrangian evaluation of the two-description system.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoders::{build_decoders, DecoderTable};
use crate::engine::{CostWeights, Encoded};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{fmt_num, write_atomic};
use crate::numerics::{build_source_grid, ChannelGrid, SourceGrid};

/// Bandwidth mode: one channel use per source symbol, or one per two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "1to1")]
    OneToOne,
    #[serde(rename = "2to1")]
    TwoToOne,
}

impl Mode {
    /// Channel symbols per source symbol on each description.
    pub fn bandwidth_ratio(self) -> f64 {
        match self {
            Mode::OneToOne => 1.0,
            Mode::TwoToOne => 0.5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::OneToOne => "1to1",
            Mode::TwoToOne => "2to1",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1to1" => Ok(Mode::OneToOne),
            "2to1" => Ok(Mode::TwoToOne),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected 1to1 or 2to1)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub source_variance: f64,
    pub noise_variance_1: f64,
    pub noise_variance_2: f64,
    /// Probability that each channel fails.
    pub epsilon: f64,
    /// Lagrange multiplier on the total transmit power.
    pub lambda: f64,
    pub mode: Mode,
    /// Per-channel power target; when set, `lambda` is searched to meet it.
    pub power_target: Option<f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            source_variance: 1.0,
            noise_variance_1: 1.0,
            noise_variance_2: 1.0,
            epsilon: 0.01,
            lambda: 0.0,
            mode: Mode::OneToOne,
            power_target: None,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.source_variance) {
            return Err(Error::Config(format!("source_variance must be positive, got {}", self.source_variance)));
        }
        if !positive(self.noise_variance_1) || !positive(self.noise_variance_2) {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 0.5], got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if let Some(p) = self.power_target {
            if !positive(p) {
                return Err(Error::Config(format!("power_target must be positive, got {p}")));
            }
        }
        Ok(())
    }

    pub fn noise_variances(&self) -> [f64; 2] {
        [self.noise_variance_1, self.noise_variance_2]
    }

    pub(crate) fn cost_weights(&self) -> CostWeights {
        CostWeights { epsilon: self.epsilon, lambda: self.lambda }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_power_target(mut self, power: Option<f64>) -> Self {
        self.power_target = power;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

/// Discretization settings shared by evaluation and optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub source_points: usize,
    /// In multiples of the source standard deviation.
    pub source_half_range: f64,
    pub channel_points: usize,
    /// Channel grids span `max|g| + channel_margin_sd·σ_N` on each side.
    pub channel_margin_sd: f64,
    pub exec: Exec,
}

impl GridSpec {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::OneToOne => GridSpec {
                source_points: 401,
                source_half_range: 5.0,
                channel_points: 129,
                channel_margin_sd: 5.0,
                exec: Exec::default(),
            },
            Mode::TwoToOne => GridSpec {
                source_points: 61,
                source_half_range: 4.0,
                channel_points: 101,
                channel_margin_sd: 5.0,
                exec: Exec::default(),
            },
        }
    }

    pub fn source_grid(&self, variance: f64) -> Result<SourceGrid> {
        build_source_grid(self.source_points, self.source_half_range, variance)
    }

    pub(crate) fn grids_for(&self, max_abs: [f64; 2], noise_variance: [f64; 2]) -> Result<[ChannelGrid; 2]> {
        Ok([
            ChannelGrid::covering(max_abs[0], noise_variance[0], self.channel_points, self.channel_margin_sd)?,
            ChannelGrid::covering(max_abs[1], noise_variance[1], self.channel_points, self.channel_margin_sd)?,
        ])
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::for_mode(Mode::OneToOne)
    }
}

/// Encoder pair `g1, g2` sampled on the source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMapping {
    grid: SourceGrid,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl ScalarMapping {
    pub fn new(grid: SourceGrid, g1: Vec<f64>, g2: Vec<f64>) -> Result<Self> {
        if g1.len() != grid.len() || g2.len() != grid.len() {
            return Err(Error::Contract(format!(
                "mapping has {}/{} values for a {}-point grid",
                g1.len(),
                g2.len(),
                grid.len()
            )));
        }
        if g1.iter().chain(&g2).any(|v| !v.is_finite()) {
            return Err(Error::Contract("mapping values must be finite".into()));
        }
        Ok(ScalarMapping { grid, g1, g2 })
    }

    /// `g_i(x) = slope_i · x`.
    pub fn linear(grid: SourceGrid, slope1: f64, slope2: f64) -> Self {
        let g1 = grid.points().iter().map(|x| slope1 * x).collect();
        let g2 = grid.points().iter().map(|x| slope2 * x).collect();
        ScalarMapping { grid, g1, g2 }
    }

    pub fn grid(&self) -> &SourceGrid {
        &self.grid
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn g2(&self) -> &[f64] {
        &self.g2
    }

    pub fn max_abs(&self) -> [f64; 2] {
        let m = |g: &[f64]| g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        [m(&self.g1), m(&self.g2)]
    }

    pub(crate) fn points(&self) -> Vec<[f64; 1]> {
        self.grid.points().iter().map(|&x| [x]).collect()
    }

    /// Writes the `x,g1,g2` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,g1,g2\n");
        for k in 0..self.grid.len() {
            let _ = writeln!(s, "{},{},{}", fmt_num(self.grid.points()[k]), fmt_num(self.g1[k]), fmt_num(self.g2[k]));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())
    }

    /// Parses an `x,g1,g2` table and checks its nodes against `grid`.
    pub fn from_csv(text: &str, grid: SourceGrid) -> Result<Self> {
        let rows = crate::io::parse_table(text, &["x", "g1", "g2"])?;
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        if !grid.matches(&xs, 1e-9) {
            return Err(Error::Config(format!(
                "mapping grid ({} rows) does not match the configured {}-point source grid",
                xs.len(),
                grid.len()
            )));
        }
        ScalarMapping::new(grid, rows.iter().map(|r| r[1]).collect(), rows.iter().map(|r| r[2]).collect())
    }

    pub fn read_csv(path: &Path, grid: SourceGrid) -> Result<Self> {
        ScalarMapping::from_csv(&std::fs::read_to_string(path)?, grid)
    }
}

/// Distortions, powers, and the Lagrangian cost of one system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub p1: f64,
    pub p2: f64,
    pub d_total: f64,
    pub j_cost: f64,
    pub snr_db: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Metrics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(d0: f64, d1: f64, d2: f64, p1: f64, p2: f64, epsilon: f64, lambda: f64, source_variance: f64) -> Self {
        let d_total = (1.0 - epsilon) * d0 + epsilon * (d1 + d2);
        let j_cost = d_total + lambda * (p1 + p2);
        let snr_db = 10.0 * (source_variance / d_total).log10();
        Metrics { d0, d1, d2, p1, p2, d_total, j_cost, snr_db, epsilon, lambda }
    }

    /// Same distortions and powers re-weighted with another multiplier.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Metrics { lambda, j_cost: self.d_total + lambda * (self.p1 + self.p2), ..*self }
    }

    pub fn max_power(&self) -> f64 {
        self.p1.max(self.p2)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("d0", self.d0),
            ("d1", self.d1),
            ("d2", self.d2),
            ("p1", self.p1),
            ("p2", self.p2),
            ("d_total", self.d_total),
            ("j_cost", self.j_cost),
            ("snr_db", self.snr_db),
            ("epsilon", self.epsilon),
            ("lambda", self.lambda),
        ] {
            let _ = writeln!(s, "{k} = {}", fmt_num(v));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::io::toml_error(text, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_text())
    }
}

/// `P_i = Σ_k p_k g_i(x_k)²`.
pub fn transmission_power(mapping: &ScalarMapping) -> (f64, f64) {
    let pts = mapping.points();
    Encoded { points: &pts, weights: mapping.grid.weights(), g1: &mapping.g1, g2: &mapping.g2 }.powers()
}

/// Channel grids sized for `mapping` under the discretization `spec`.
pub fn channel_grids(mapping: &ScalarMapping, cfg: &SystemConfig, spec: &GridSpec) -> Result<(ChannelGrid, ChannelGrid)> {
    let [a, b] = spec.grids_for(mapping.max_abs(), cfg.noise_variances())?;
    Ok((a, b))
}

/// Distortions of `mapping` under the given decoder tables.
pub fn evaluate_system(mapping: &ScalarMapping, decoders: &DecoderTable, cfg: &SystemConfig) -> Result<Metrics> {
    evaluate_system_with(mapping, decoders, cfg, Exec::default())
}

pub fn evaluate_system_with(mapping: &ScalarMapping, decoders: &DecoderTable, cfg: &SystemConfig, exec: Exec) -> Result<Metrics> {
    cfg.validate()?;
    if decoders.noise_variance != cfg.noise_variances() {
        return Err(Error::Contract("decoder tables were built for different noise variances".into()));
    }
    let pts = mapping.points();
    let enc = Encoded { points: &pts, weights: mapping.grid.weights(), g1: &mapping.g1, g2: &mapping.g2 };
    enc.evaluate(decoders, cfg.epsilon, cfg.lambda, cfg.source_variance, exec)
}

/// Rebuilds channel grids and MMSE decoders for `mapping`, then evaluates it.
pub fn evaluate_mmse(mapping: &ScalarMapping, cfg: &SystemConfig, spec: &GridSpec) -> Result<(Metrics, DecoderTable)> {
    cfg.validate()?;
    let (a, b) = channel_grids(mapping, cfg, spec)?;
    let pts = mapping.points();
    let enc = Encoded { points: &pts, weights: mapping.grid.weights(), g1: &mapping.g1, g2: &mapping.g2 };
    let dec = build_decoders(&enc.atoms(), [a, b], cfg.noise_variances(), 0.0, spec.exec);
    let m = enc.evaluate(&dec, cfg.epsilon, cfg.lambda, cfg.source_variance, spec.exec)?;
    Ok((m, dec))
}
