//! Grids, Gaussian densities and trapezoid quadrature.

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian density with zero mean, evaluated without argument checks.
#[inline]
pub(crate) fn gauss(u: f64, variance: f64) -> f64 {
    INV_SQRT_2PI / variance.sqrt() * (-0.5 * u * u / variance).exp()
}

/// `(2π·variance)^{-1/2} · exp(-u² / (2·variance))`.
pub fn gaussian_density(u: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Config(format!("variance must be positive, got {variance}")));
    }
    Ok(gauss(u, variance))
}

/// Uniform, density-weighted discretization of a zero-mean Gaussian source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    half_range: f64,
    variance: f64,
}

/// Builds the uniform grid on `[-half_range·σ, half_range·σ]` with renormalized
/// Gaussian weights. `n_points` must be odd so that 0 is a node.
pub fn build_source_grid(n_points: usize, half_range: f64, variance: f64) -> Result<SourceGrid> {
    if n_points < 3 || n_points % 2 == 0 {
        return Err(Error::Config(format!(
            "source grid needs an odd number of points >= 3, got {n_points}"
        )));
    }
    if !(half_range > 0.0) || !half_range.is_finite() {
        return Err(Error::Config(format!("half_range must be positive, got {half_range}")));
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Config(format!("source variance must be positive, got {variance}")));
    }
    let sigma = variance.sqrt();
    let half = (n_points / 2) as i64;
    let step = half_range * sigma / half as f64;
    // integer offsets keep the grid exactly symmetric
    let points: Vec<f64> = (-half..=half).map(|i| i as f64 * step).collect();
    let raw: Vec<f64> = points.iter().map(|&x| gauss(x, variance)).collect();
    let total = pairwise_sum(&raw);
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    // enforce exact mirror symmetry of the weights
    let n = weights.len();
    for i in 0..n / 2 {
        let avg = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = avg;
        weights[n - 1 - i] = avg;
    }
    Ok(SourceGrid { points, weights, half_range, variance })
}

impl SourceGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn half_range(&self) -> f64 {
        self.half_range
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.points[1] - self.points[0]
    }

    /// `Σ p_k f(x_k)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self.points.iter().zip(&self.weights).map(|(&x, &p)| p * f(x)).collect();
        pairwise_sum(&terms)
    }

    /// True when `other` has the same nodes within a relative tolerance.
    pub fn matches(&self, other: &[f64], rel_tol: f64) -> bool {
        let scale = self.half_range * self.variance.sqrt();
        self.points.len() == other.len()
            && self.points.iter().zip(other).all(|(a, b)| (a - b).abs() <= rel_tol * scale)
    }
}

/// Uniform channel-output grid with trapezoid weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGrid {
    points: Vec<f64>,
    quad_weights: Vec<f64>,
    spacing: f64,
}

impl ChannelGrid {
    pub fn uniform(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Config(format!("channel grid needs >= 2 points, got {n_points}")));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid channel grid range [{lo}, {hi}]")));
        }
        let spacing = (hi - lo) / (n_points - 1) as f64;
        let points: Vec<f64> = (0..n_points)
            .map(|j| if j + 1 == n_points { hi } else { lo + j as f64 * spacing })
            .collect();
        let mut quad_weights = vec![spacing; n_points];
        quad_weights[0] = 0.5 * spacing;
        quad_weights[n_points - 1] = 0.5 * spacing;
        Ok(ChannelGrid { points, quad_weights, spacing })
    }

    /// Symmetric grid spanning `±(max_abs + margin_sd·σ_N)`.
    pub fn covering(max_abs: f64, noise_variance: f64, n_points: usize, margin_sd: f64) -> Result<Self> {
        let half = max_abs.abs() + margin_sd * noise_variance.sqrt();
        ChannelGrid::uniform(-half, half, n_points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Index range `[lo, hi)` of nodes with `|y - center| <= radius`.
    pub(crate) fn window(&self, center: f64, radius: f64) -> (usize, usize) {
        let n = self.points.len();
        let y0 = self.points[0];
        let lo = ((center - radius - y0) / self.spacing).ceil();
        let hi = ((center + radius - y0) / self.spacing).floor();
        let lo = if lo.is_nan() || lo < 0.0 { 0 } else { (lo as usize).min(n) };
        let hi = if hi.is_nan() || hi < 0.0 { 0 } else { ((hi as usize) + 1).min(n) };
        (lo, hi.max(lo))
    }
}

/// Trapezoid integral of samples on `grid`.
pub fn integrate_1d(values: &[f64], grid: &ChannelGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::Contract(format!(
            "integrate_1d: {} values for a {}-point grid",
            values.len(),
            grid.len()
        )));
    }
    let terms: Vec<f64> = values.iter().zip(&grid.quad_weights).map(|(v, w)| v * w).collect();
    Ok(pairwise_sum(&terms))
}

/// Tensor-product trapezoid integral of a row-major `g1.len() × g2.len()` table.
pub fn integrate_2d(values: &[f64], g1: &ChannelGrid, g2: &ChannelGrid) -> Result<f64> {
    if values.len() != g1.len() * g2.len() {
        return Err(Error::Contract(format!(
            "integrate_2d: {} values for a {}x{} grid",
            values.len(),
            g1.len(),
            g2.len()
        )));
    }
    let rows: Vec<f64> = values
        .chunks(g2.len())
        .zip(&g1.quad_weights)
        .map(|(row, w1)| {
            let inner: Vec<f64> = row.iter().zip(&g2.quad_weights).map(|(v, w)| v * w).collect();
            w1 * pairwise_sum(&inner)
        })
        .collect();
    Ok(pairwise_sum(&rows))
}

/// Fixed-order pairwise summation.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
