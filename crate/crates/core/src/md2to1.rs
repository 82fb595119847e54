//! The 2:1 system: each channel symbol carries a pair of i.i.d. source symbols.
//!
//! Distortions are per source symbol (`E‖X − X̂‖² / 2`) so SNRs compare
//! directly with the 1:1 system; powers are per channel symbol.

use std::fmt::Write as _;
use std::path::Path;

use crate::annealer::{design, evaluate_encoder, AnnealSchedule, AnnealTrace, DesignInputs, LocalModel, Origin, Problem};
use crate::decoders::{build_decoders, check_grids, Atom, Decoders};
use crate::engine::{Encoded, Order};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{fmt_num, parse_table, write_atomic};
use crate::numerics::{ChannelGrid, SourceGrid};
use crate::system::{GridSpec, Metrics, Mode, SystemConfig};


/// Decoder tables whose entries are estimates of the source pair.
pub type VectorDecoders = Decoders<2>;

/// Product grid over `(x1, x2)`, row-major with `x1` varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Source2DGrid {
    axis: SourceGrid,
    weights: Vec<f64>,
}

impl Source2DGrid {
    pub fn new(axis: SourceGrid) -> Self {
        let w = axis.weights();
        let weights = w.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect();
        Source2DGrid { axis, weights }
    }

    pub fn axis(&self) -> &SourceGrid {
        &self.axis
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let x = self.axis.points();
        x.iter().flat_map(|&a| x.iter().map(move |&b| [a, b])).collect()
    }

    fn index(&self, k: usize, l: usize) -> usize {
        k * self.axis.len() + l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorMapping {
    grid: Source2DGrid,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl VectorMapping {
    pub fn new(grid: Source2DGrid, g1: Vec<f64>, g2: Vec<f64>) -> Result<Self> {
        if g1.len() != grid.len() || g2.len() != grid.len() {
            return Err(Error::Contract(format!("mapping has {}/{} values for a {}-point grid", g1.len(), g2.len(), grid.len())));
        }
        if g1.iter().chain(&g2).any(|v| !v.is_finite()) {
            return Err(Error::Contract("mapping values must be finite".into()));
        }
        Ok(VectorMapping { grid, g1, g2 })
    }

    pub fn from_fn(grid: Source2DGrid, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let (g1, g2) = grid.points().iter().map(|p| f(p[0], p[1])).map(|u| (u[0], u[1])).unzip();
        VectorMapping::new(grid, g1, g2)
    }

    pub fn grid(&self) -> &Source2DGrid {
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

    /// The mapping seen with the source axes swapped.
    pub fn transposed(&self) -> Self {
        let n = self.grid.axis.len();
        let t = |g: &[f64]| (0..n * n).map(|i| g[self.grid.index(i % n, i / n)]).collect();
        VectorMapping { grid: self.grid.clone(), g1: t(&self.g1), g2: t(&self.g2) }
    }

    fn encoded<'a>(&'a self, points: &'a [[f64; 2]]) -> Encoded<'a, 2> {
        Encoded { points, weights: self.grid.weights(), g1: &self.g1, g2: &self.g2 }
    }

    /// Writes the `x1,x2,g1,g2` table in grid order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,g1,g2\n");
        for (i, p) in self.grid.points().iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", fmt_num(p[0]), fmt_num(p[1]), fmt_num(self.g1[i]), fmt_num(self.g2[i]));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())
    }

    pub fn from_csv(text: &str, grid: Source2DGrid) -> Result<Self> {
        let rows = parse_table(text, &["x1", "x2", "g1", "g2"])?;
        let pts = grid.points();
        let tol = 1e-9 * grid.axis.half_range().max(1.0);
        if rows.len() != pts.len() || rows.iter().zip(&pts).any(|(r, p)| (r[0] - p[0]).abs() > tol || (r[1] - p[1]).abs() > tol) {
            return Err(Error::Config(format!(
                "mapping grid ({} rows) does not match the configured {}-point source grid",
                rows.len(),
                pts.len()
            )));
        }
        VectorMapping::new(grid, rows.iter().map(|r| r[2]).collect(), rows.iter().map(|r| r[3]).collect())
    }

    pub fn read_csv(path: &Path, grid: Source2DGrid) -> Result<Self> {
        VectorMapping::from_csv(&std::fs::read_to_string(path)?, grid)
    }
}

/// Exact MMSE vector decoders for a deterministic 2:1 encoder.
pub fn optimal_decoders_2to1(mapping: &VectorMapping, grid1: ChannelGrid, grid2: ChannelGrid, cfg: &SystemConfig, exec: Exec) -> Result<VectorDecoders> {
    cfg.validate()?;
    let grids = [grid1, grid2];
    check_grids(&grids, cfg.noise_variances())?;
    let pts = mapping.grid.points();
    let atoms: Vec<Atom<2>> = mapping.encoded(&pts).atoms();
    Ok(build_decoders(&atoms, grids, cfg.noise_variances(), 0.0, exec))
}

/// Per-symbol distortions of `mapping` under the given decoders.
pub fn evaluate_system_2to1(mapping: &VectorMapping, decoders: &VectorDecoders, cfg: &SystemConfig) -> Result<Metrics> {
    cfg.validate()?;
    if decoders.noise_variance != cfg.noise_variances() {
        return Err(Error::Contract("decoder tables were built for different noise variances".into()));
    }
    let pts = mapping.grid.points();
    mapping.encoded(&pts).evaluate(decoders, cfg.epsilon, cfg.lambda, cfg.source_variance, Exec::default())
}

/// Rebuilds channel grids and MMSE decoders for `mapping`, then evaluates it.
pub fn evaluate_mmse_2to1(mapping: &VectorMapping, cfg: &SystemConfig, spec: &GridSpec) -> Result<(Metrics, VectorDecoders)> {
    cfg.validate()?;
    let pts = mapping.grid.points();
    let pb = Problem { points: &pts, weights: mapping.grid.weights(), cfg, spec };
    let (m, dec, _) = evaluate_encoder(&pb, &mapping.g1, &mapping.g2, Order::Value)?;
    Ok((m, dec))
}

pub fn source_grid_2to1(cfg: &SystemConfig, spec: &GridSpec) -> Result<Source2DGrid> {
    Ok(Source2DGrid::new(spec.source_grid(cfg.source_variance)?))
}

/// Local model of the projection scheme: `g1 ∝ x1 + x2`, `g2 ∝ x1 − x2`,
/// each scaled to power `p`.
pub(crate) fn projection_model(p: f64, source_variance: f64) -> LocalModel<2> {
    let c = (p / (2.0 * source_variance)).sqrt();
    LocalModel { slope: [[c, c], [c, -c]], offset: [0.0, 0.0] }
}

/// Multiplier at which the projection scheme with per-channel power `p` is stationary.
pub fn projection_stationary_lambda(cfg: &SystemConfig, p: f64) -> f64 {
    let s2 = cfg.source_variance;
    let [v1, v2] = cfg.noise_variances();
    0.25 * s2 * (v1 / ((v1 + p) * (v1 + p)) + v2 / ((v2 + p) * (v2 + p)))
}

#[derive(Clone, Debug)]
pub struct AnnealOutcome2to1 {
    pub mapping: VectorMapping,
    pub metrics: Metrics,
    pub trace: AnnealTrace,
    pub origin: Origin,
    pub lambda: f64,
    /// The projection scheme under `lambda`.
    pub baseline: Metrics,
    pub candidates: Vec<(Origin, Metrics)>,
}

/// Deterministic-annealing design of a 2:1 encoder pair.
pub fn anneal_2to1(cfg: &SystemConfig, schedule: &AnnealSchedule, spec: &GridSpec, seed: u64) -> Result<AnnealOutcome2to1> {
    anneal_2to1_with(cfg, schedule, spec, seed, &[])
}

pub fn anneal_2to1_with(cfg: &SystemConfig, schedule: &AnnealSchedule, spec: &GridSpec, seed: u64, seeded: &[VectorMapping]) -> Result<AnnealOutcome2to1> {
    cfg.validate()?;
    if cfg.mode != Mode::TwoToOne {
        return Err(Error::Config("anneal_2to1 requires the 2to1 mode".into()));
    }
    let grid = source_grid_2to1(cfg, spec)?;
    let pts = grid.points();
    let p = cfg.power_target.unwrap_or(1.0);
    let seeded: Vec<(Vec<f64>, Vec<f64>)> = seeded
        .iter()
        .map(|m| {
            if m.grid != grid {
                return Err(Error::Config("warm-start mapping uses a different source grid".into()));
            }
            Ok((m.g1.clone(), m.g2.clone()))
        })
        .collect::<Result<_>>()?;
    let d = design(&DesignInputs {
        points: &pts,
        weights: grid.weights(),
        cfg,
        spec,
        schedule,
        seed,
        baseline_model: projection_model(p, cfg.source_variance),
        baseline_lambda: projection_stationary_lambda(cfg, p),
        seeded: &seeded,
    })?;
    Ok(AnnealOutcome2to1 {
        mapping: VectorMapping::new(grid, d.g1, d.g2)?,
        metrics: d.metrics,
        trace: d.trace,
        origin: d.origin,
        lambda: d.lambda,
        baseline: d.baseline,
        candidates: d.candidates,
    })
}

/// One encoder as a dense matrix: a header row of `x2` nodes, then one row
/// per `x1` node led by its coordinate. Suited to contour plotting of the
/// level sets.
pub fn export_structure(mapping: &VectorMapping, channel: usize) -> String {
    let g = if channel == 0 { &mapping.g1 } else { &mapping.g2 };
    let x = mapping.grid.axis.points();
    let mut s = String::from("x1\\x2");
    for v in x {
        let _ = write!(s, ",{}", fmt_num(*v));
    }
    s.push('\n');
    for (k, v) in x.iter().enumerate() {
        s.push_str(&fmt_num(*v));
        for l in 0..x.len() {
            let _ = write!(s, ",{}", fmt_num(g[mapping.grid.index(k, l)]));
        }
        s.push('\n');
    }
    s
}
