//! Information-theoretic bound (OPTA) for two Gaussian descriptions sent over
//! two AWGN channels, and the minimum weighted distortion over its region.

use crate::error::{Error, Result};

/// Slack on the feasibility checks and square-root clamping.
const SLACK: f64 = 1e-12;
const GRID: usize = 200;
const GOLDEN_ITERS: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptaQuery {
    pub p1: f64,
    pub p2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma2: f64,
    pub epsilon: f64,
}

impl OptaQuery {
    pub fn symmetric(power: f64, beta: f64, epsilon: f64) -> Self {
        OptaQuery { p1: power, p2: power, beta1: beta, beta2: beta, sigma2: 1.0, epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.p1) || !ok(self.p2) || !ok(self.beta1) || !ok(self.beta2) || !ok(self.sigma2) {
            return Err(Error::Config(format!("invalid OPTA query {self:?}")));
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 0.5], got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `ν = σ²(1+P1)^{-β1}(1+P2)^{-β2}`.
    pub fn nu(&self) -> f64 {
        self.sigma2 * (1.0 + self.p1).powf(-self.beta1) * (1.0 + self.p2).powf(-self.beta2)
    }

    pub fn side_bounds(&self) -> [f64; 2] {
        [
            opta_side_bound(self.p1, self.beta1, self.sigma2),
            opta_side_bound(self.p2, self.beta2, self.sigma2),
        ]
    }

    fn is_symmetric(&self) -> bool {
        self.p1 == self.p2 && self.beta1 == self.beta2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptaPoint {
    pub d1: f64,
    pub d2: f64,
    pub d0: f64,
    pub nu: f64,
    pub phi: f64,
    pub d_total: f64,
    pub snr_db: f64,
}

/// Smallest side distortion reachable at power `p` and bandwidth ratio `beta`.
pub fn opta_side_bound(p: f64, beta: f64, sigma2: f64) -> f64 {
    sigma2 * (1.0 + p).powf(-beta)
}

fn clamp_root(v: f64, what: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v.sqrt())
    } else if v >= -SLACK {
        Ok(0.0)
    } else {
        Err(Error::Domain(format!("{what} is negative ({v:e})")))
    }
}

/// Central distortion achievable together with side distortions `(d1, d2)`.
///
/// Returns `(d0, ν, φ)`. Distortions are normalized by `σ²` inside the
/// correction factor so the result scales with the source variance.
pub fn opta_central(d1: f64, d2: f64, q: &OptaQuery) -> Result<(f64, f64, f64)> {
    q.validate()?;
    let s2 = q.sigma2;
    for (d, lb) in [(d1, q.side_bounds()[0]), (d2, q.side_bounds()[1])] {
        if !(d >= lb - SLACK && d <= s2 + SLACK) {
            return Err(Error::Domain(format!("side distortion {d} outside [{lb}, {s2}]")));
        }
    }
    let nu = q.nu();
    if d1 + d2 > s2 + nu {
        return Ok((nu, nu, 1.0));
    }
    let (a1, a2) = (d1 / s2, d2 / s2);
    let n = nu / s2;
    let outer = clamp_root((1.0 - a1) * (1.0 - a2), "(1 - d1)(1 - d2)")?;
    let inner = clamp_root(a1 * a2 - n, "d1·d2 - ν")?;
    let den = 1.0 - (outer - inner).powi(2);
    if !(den > 0.0) {
        return Err(Error::Domain(format!("non-positive correction denominator {den:e} at d1={d1}, d2={d2}")));
    }
    let phi = 1.0 / den;
    Ok((nu * phi, nu, phi))
}

fn weighted(d1: f64, d2: f64, q: &OptaQuery) -> f64 {
    match opta_central(d1, d2, q) {
        Ok((d0, _, _)) => (1.0 - q.epsilon) * d0 + q.epsilon * (d1 + d2),
        Err(_) => f64::INFINITY,
    }
}

/// Log-spaced nodes from `hi` down to `lo` (descending, so ties favour larger distortions).
fn log_nodes(lo: f64, hi: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..GRID)
        .map(|i| {
            if i == 0 {
                hi
            } else if i + 1 == GRID {
                lo
            } else {
                (b + (a - b) * i as f64 / (GRID - 1) as f64).exp()
            }
        })
        .collect()
}

fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn bracket(nodes: &[f64], i: usize) -> (f64, f64) {
    let hi = nodes[i.saturating_sub(1)];
    let lo = nodes[(i + 1).min(nodes.len() - 1)];
    (lo, hi)
}

/// Coordinate-wise golden-section refinement around a starting point.
fn refine(q: &OptaQuery, mut d: [f64; 2], mut cost: f64, mut spans: [(f64, f64); 2]) -> ([f64; 2], f64) {
    let lb = q.side_bounds();
    for _ in 0..100 {
        let before = cost;
        for axis in 0..2 {
            let f = |v: f64| {
                let mut t = d;
                t[axis] = v;
                weighted(t[0], t[1], q)
            };
            let (x, fx) = golden(f, spans[axis].0, spans[axis].1);
            if fx < cost {
                d[axis] = x;
                cost = fx;
            }
            let w = 0.5 * (spans[axis].1 - spans[axis].0);
            spans[axis] = ((d[axis] - w).max(lb[axis]), (d[axis] + w).min(q.sigma2));
        }
        if before - cost <= 1e-10 * before.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (d, cost)
}

fn search_2d(q: &OptaQuery) -> ([f64; 2], f64) {
    let lb = q.side_bounds();
    let n1 = log_nodes(lb[0], q.sigma2);
    let n2 = log_nodes(lb[1], q.sigma2);
    let mut best = (0, 0, f64::INFINITY);
    for (i, &a) in n1.iter().enumerate() {
        for (j, &b) in n2.iter().enumerate() {
            let c = weighted(a, b, q);
            if c < best.2 {
                best = (i, j, c);
            }
        }
    }
    let (i, j, c) = best;
    refine(q, [n1[i], n2[j]], c, [bracket(&n1, i), bracket(&n2, j)])
}

fn search_symmetric(q: &OptaQuery) -> (f64, f64) {
    let lb = q.side_bounds()[0];
    let nodes = log_nodes(lb, q.sigma2);
    let f = |v: f64| weighted(v, v, q);
    let (i, c) = nodes
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| {
            let c = f(v);
            if c < best.1 {
                (i, c)
            } else {
                best
            }
        });
    let (lo, hi) = bracket(&nodes, i);
    let (x, fx) = golden(f, lo, hi);
    if fx < c {
        (x, fx)
    } else {
        (nodes[i], c)
    }
}

/// Minimizes `(1-ε)·d0(d1, d2) + ε·(d1 + d2)` over the achievable rectangle.
pub fn opta_min_cost(q: &OptaQuery) -> Result<OptaPoint> {
    q.validate()?;
    let (d, cost) = search_2d(q);
    let d = if q.is_symmetric() {
        let (v, c) = search_symmetric(q);
        // the symmetric answer stands unless the unrestricted search is clearly better
        if c <= cost + 1e-9 * cost {
            [v, v]
        } else {
            d
        }
    } else {
        d
    };
    let (d0, nu, phi) = opta_central(d[0], d[1], q)?;
    let d_total = (1.0 - q.epsilon) * d0 + q.epsilon * (d[0] + d[1]);
    Ok(OptaPoint { d1: d[0], d2: d[1], d0, nu, phi, d_total, snr_db: 10.0 * (q.sigma2 / d_total).log10() })
}

/// `10·log10(σ²/ν)`: the best central SNR at the given powers.
pub fn opta_central_snr_db(q: &OptaQuery) -> f64 {
    10.0 * (q.sigma2 / q.nu()).log10()
}
