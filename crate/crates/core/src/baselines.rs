//! Reference schemes: linear encoding (1:1) and orthogonal projections (2:1).

use crate::error::{Error, Result};
use crate::md2to1::{evaluate_mmse_2to1, projection_model, source_grid_2to1, VectorMapping};
use crate::system::{evaluate_mmse, GridSpec, Metrics, Mode, ScalarMapping, SystemConfig};

/// Numerical and closed-form metrics must agree this closely (relative).
const CONSISTENCY_TOL: f64 = 5e-3;

#[derive(Clone, Debug)]
pub struct LinearScheme {
    pub mapping: ScalarMapping,
    /// Gaussian MMSE formulas.
    pub closed_form: Metrics,
    /// MMSE decoders on the quadrature grids.
    pub numeric: Metrics,
}

/// Closed-form metrics of `g_i(x) = √p_i·x/σ`.
pub fn linear_closed_form(cfg: &SystemConfig, p1: f64, p2: f64) -> Metrics {
    let s2 = cfg.source_variance;
    let [v1, v2] = cfg.noise_variances();
    let d1 = s2 * v1 / (v1 + p1);
    let d2 = s2 * v2 / (v2 + p2);
    let d0 = s2 / (1.0 + p1 / v1 + p2 / v2);
    Metrics::new(d0, d1, d2, p1, p2, cfg.epsilon, cfg.lambda, s2)
}

pub fn linear_scheme(cfg: &SystemConfig, p1: f64, p2: f64, spec: &GridSpec) -> Result<LinearScheme> {
    linear_scheme_signed(cfg, p1, p2, [1.0, 1.0], spec)
}

/// [`linear_scheme`] with encoder signs `s_i ∈ {±1}`.
pub fn linear_scheme_signed(cfg: &SystemConfig, p1: f64, p2: f64, signs: [f64; 2], spec: &GridSpec) -> Result<LinearScheme> {
    cfg.validate()?;
    if cfg.mode != Mode::OneToOne {
        return Err(Error::Config("linear scheme requires the 1to1 mode".into()));
    }
    if !(p1 > 0.0 && p2 > 0.0 && p1.is_finite() && p2.is_finite()) {
        return Err(Error::Config(format!("powers must be positive, got ({p1}, {p2})")));
    }
    if signs.iter().any(|s| s.abs() != 1.0) {
        return Err(Error::Contract("encoder signs must be ±1".into()));
    }
    let grid = spec.source_grid(cfg.source_variance)?;
    let sd = cfg.source_variance.sqrt();
    let mapping = ScalarMapping::linear(grid, signs[0] * p1.sqrt() / sd, signs[1] * p2.sqrt() / sd);
    let (numeric, _) = evaluate_mmse(&mapping, cfg, spec)?;
    let closed_form = linear_closed_form(cfg, p1, p2);
    for (name, a, b) in [("D0", numeric.d0, closed_form.d0), ("D1", numeric.d1, closed_form.d1), ("D2", numeric.d2, closed_form.d2)] {
        if (a - b).abs() > CONSISTENCY_TOL * b {
            return Err(Error::NumericalContract(format!(
                "linear {name}: quadrature gives {a}, closed form {b}; the grids are too coarse"
            )));
        }
    }
    Ok(LinearScheme { mapping, closed_form, numeric })
}

/// `g1 ∝ x1 + x2`, `g2 ∝ x1 − x2`, each with power `p`.
pub fn projection_baseline_2to1(cfg: &SystemConfig, p: f64, spec: &GridSpec) -> Result<(VectorMapping, Metrics)> {
    cfg.validate()?;
    if cfg.mode != Mode::TwoToOne {
        return Err(Error::Config("projection baseline requires the 2to1 mode".into()));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::Config(format!("power must be positive, got {p}")));
    }
    let grid = source_grid_2to1(cfg, spec)?;
    let model = projection_model(p, cfg.source_variance);
    let mapping = VectorMapping::from_fn(grid, |a, b| model.apply(&[a, b]))?;
    let (m, _) = evaluate_mmse_2to1(&mapping, cfg, spec)?;
    Ok((mapping, m))
}
