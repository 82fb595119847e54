//! Per-source-point expectations shared by evaluation, annealing and refinement.
//!
//! For a source value `x` sent as channel inputs `u = (u1, u2)` the kernel
//! integrates the squared reconstruction error of the central and side
//! decoders against the channel noise densities on the decoder grids, and
//! optionally the first and second derivatives in `u`. The noise density is
//! truncated at `KERNEL_RADIUS_SD` standard deviations, where it is below
//! `1e-21` of its peak.

use crate::decoders::{Atom, Decoders};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{gauss, pairwise_sum, ChannelGrid};
use crate::system::Metrics;

pub(crate) const KERNEL_RADIUS_SD: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Distortion integrals for one source point (per source component).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct PointEval {
    pub central: f64,
    pub side: [f64; 2],
    /// d central / d u_i
    pub central_grad: [f64; 2],
    pub central_hess: [[f64; 2]; 2],
    /// d side_i / d u_i
    pub side_grad: [f64; 2],
    pub side_curv: [f64; 2],
}

/// Weights of the per-point cost `(1-ε)·D0 + ε·(D1 + D2) + λ·(u1² + u2²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct CostWeights {
    pub epsilon: f64,
    pub lambda: f64,
}

impl PointEval {
    pub fn cost(&self, w: CostWeights, u: [f64; 2]) -> f64 {
        (1.0 - w.epsilon) * self.central + w.epsilon * (self.side[0] + self.side[1]) + w.lambda * (u[0] * u[0] + u[1] * u[1])
    }

    pub fn grad(&self, w: CostWeights, u: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (1.0 - w.epsilon) * self.central_grad[i] + w.epsilon * self.side_grad[i] + 2.0 * w.lambda * u[i])
    }

    pub fn hess(&self, w: CostWeights) -> [[f64; 2]; 2] {
        let c = 1.0 - w.epsilon;
        let mut h = self.central_hess.map(|r| r.map(|v| c * v));
        for i in 0..2 {
            h[i][i] += w.epsilon * self.side_curv[i] + 2.0 * w.lambda;
        }
        h
    }
}

struct Window {
    lo: usize,
    /// quadrature weight × noise density
    phi: Vec<f64>,
    /// y - u
    dy: Vec<f64>,
}

fn window(grid: &ChannelGrid, u: f64, variance: f64) -> Window {
    let (lo, hi) = grid.window(u, KERNEL_RADIUS_SD * variance.sqrt());
    let ys = &grid.points()[lo..hi];
    let qw = &grid.quad_weights()[lo..hi];
    let dy: Vec<f64> = ys.iter().map(|y| y - u).collect();
    let phi = dy.iter().zip(qw).map(|(d, w)| w * gauss(*d, variance)).collect();
    Window { lo, phi, dy }
}

#[inline]
fn sq_err<const D: usize>(x: &[f64; D], w: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let e = x[d] - w[d];
        s += e * e;
    }
    s / D as f64
}

pub(crate) fn point_eval<const D: usize>(x: &[f64; D], u: [f64; 2], dec: &Decoders<D>, order: Order) -> PointEval {
    let v = dec.noise_variance;
    let w1 = window(&dec.grids[0], u[0], v[0]);
    let w2 = window(&dec.grids[1], u[1], v[1]);
    let mut out = PointEval::default();

    // side decoders
    for (i, win) in [&w1, &w2].into_iter().enumerate() {
        let table = &dec.side[i][win.lo..win.lo + win.phi.len()];
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for ((p, dy), w) in win.phi.iter().zip(&win.dy).zip(table) {
            let e = p * sq_err(x, w);
            s0 += e;
            if order >= Order::Gradient {
                s1 += e * dy;
                s2 += e * dy * dy;
            }
        }
        out.side[i] = s0;
        if order >= Order::Gradient {
            out.side_grad[i] = s1 / v[i];
            out.side_curv[i] = s2 / (v[i] * v[i]) - s0 / v[i];
        }
    }

    // central decoder
    let n2 = dec.grids[1].len();
    let (mut c, mut c1, mut c2, mut h11, mut h12, mut h22) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (r, (&p1, &dy1)) in w1.phi.iter().zip(&w1.dy).enumerate() {
        let base = (w1.lo + r) * n2 + w2.lo;
        let row = &dec.central[base..base + w2.phi.len()];
        let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
        match order {
            Order::Value => {
                for (p2, w) in w2.phi.iter().zip(row) {
                    r0 += p2 * sq_err(x, w);
                }
            }
            Order::Gradient => {
                for ((p2, dy2), w) in w2.phi.iter().zip(&w2.dy).zip(row) {
                    let e = p2 * sq_err(x, w);
                    r0 += e;
                    r1 += e * dy2;
                }
            }
            Order::Hessian => {
                for ((p2, dy2), w) in w2.phi.iter().zip(&w2.dy).zip(row) {
                    let e = p2 * sq_err(x, w);
                    r0 += e;
                    r1 += e * dy2;
                    r2 += e * dy2 * dy2;
                }
            }
        }
        c += p1 * r0;
        if order >= Order::Gradient {
            c1 += p1 * dy1 * r0;
            c2 += p1 * r1;
        }
        if order == Order::Hessian {
            h11 += p1 * dy1 * dy1 * r0;
            h12 += p1 * dy1 * r1;
            h22 += p1 * r2;
        }
    }
    out.central = c;
    if order >= Order::Gradient {
        out.central_grad = [c1 / v[0], c2 / v[1]];
    }
    if order == Order::Hessian {
        let off = h12 / (v[0] * v[1]);
        out.central_hess = [[h11 / (v[0] * v[0]) - c / v[0], off], [off, h22 / (v[1] * v[1]) - c / v[1]]];
    }
    out
}

/// A deterministic encoder over an arbitrary weighted source alphabet.
pub(crate) struct Encoded<'a, const D: usize> {
    pub points: &'a [[f64; D]],
    pub weights: &'a [f64],
    pub g1: &'a [f64],
    pub g2: &'a [f64],
}

impl<'a, const D: usize> Encoded<'a, D> {
    pub fn atoms(&self) -> Vec<Atom<D>> {
        (0..self.points.len())
            .map(|k| Atom { weight: self.weights[k], x: self.points[k], u: [self.g1[k], self.g2[k]] })
            .collect()
    }

    pub fn max_abs(&self, channel: usize) -> f64 {
        let g = if channel == 0 { self.g1 } else { self.g2 };
        g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn powers(&self) -> (f64, f64) {
        let p = |g: &[f64]| {
            let t: Vec<f64> = g.iter().zip(self.weights).map(|(v, w)| w * v * v).collect();
            pairwise_sum(&t)
        };
        (p(self.g1), p(self.g2))
    }

    pub fn check_coverage(&self, dec: &Decoders<D>) -> Result<()> {
        for (i, g) in [self.g1, self.g2].into_iter().enumerate() {
            let (lo, hi) = dec.coverage(i);
            if let Some(bad) = g.iter().find(|&&v| !(v >= lo && v <= hi)) {
                return Err(Error::Evaluation(format!(
                    "channel {} input {bad} outside decoder grid coverage [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Per-point kernel values, in point order.
    pub fn point_evals(&self, dec: &Decoders<D>, order: Order, exec: Exec) -> Vec<PointEval> {
        exec.map(self.points.len(), |k| point_eval(&self.points[k], [self.g1[k], self.g2[k]], dec, order))
    }

    pub fn metrics_from(&self, evals: &[PointEval], epsilon: f64, lambda: f64, source_variance: f64) -> Metrics {
        let wsum = |f: &dyn Fn(&PointEval) -> f64| {
            let t: Vec<f64> = evals.iter().zip(self.weights).map(|(e, w)| w * f(e)).collect();
            pairwise_sum(&t)
        };
        let d0 = wsum(&|e| e.central);
        let d1 = wsum(&|e| e.side[0]);
        let d2 = wsum(&|e| e.side[1]);
        let (p1, p2) = self.powers();
        Metrics::new(d0, d1, d2, p1, p2, epsilon, lambda, source_variance)
    }

    pub fn evaluate(&self, dec: &Decoders<D>, epsilon: f64, lambda: f64, source_variance: f64, exec: Exec) -> Result<Metrics> {
        self.check_coverage(dec)?;
        let evals = self.point_evals(dec, Order::Value, exec);
        Ok(self.metrics_from(&evals, epsilon, lambda, source_variance))
    }
}
