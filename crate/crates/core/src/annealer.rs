//! Deterministic-annealing design of the encoder pair.
//!
//! Each source point is softly associated with `M` affine local models
//! through Gibbs probabilities `q(m|x)`. At every temperature `T` the inner
//! loop lowers the free energy `F = J - T·H` by block updates: MMSE decoders
//! for the randomized encoder, Gibbs associations for fixed costs, and a
//! line-searched Newton-preconditioned step on the model parameters. The
//! temperature then cools geometrically. The best hardened snapshot is
//! passed to [`greedy_refine`], which drops the parametric form and descends
//! on the per-point channel inputs directly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoders::{build_decoders, Atom, DecoderTable, Decoders};
use crate::engine::{point_eval, CostWeights, Encoded, Order, PointEval};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::fmt_num;
use crate::numerics::{pairwise_sum, ChannelGrid, SourceGrid};
use crate::system::{GridSpec, Metrics, Mode, ScalarMapping, SystemConfig};

/// Association mass below which an atom does not size the channel grids.
const ACTIVE_Q: f64 = 1e-10;
/// Pruning level of the randomized decoders inside the annealing loop.
const ANNEAL_PRUNE: f64 = 1e-30;
/// Largest channel-input move of an active atom per parameter step, in noise std.
const TRUST_SD: f64 = 2.0;
const MAX_HALVINGS: usize = 20;
/// Annealed candidates (besides the baseline start) carried into the λ search.
const SEARCH_KEEP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealSchedule {
    /// Initial temperature in units of the weighted variance of the initial costs.
    pub t_init_scale: f64,
    /// Geometric cooling factor.
    pub alpha: f64,
    /// Annealing stops once `T < t_min_ratio · T_init`.
    pub t_min_ratio: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
    /// Total restarts; restart 0 is always the single-model baseline start.
    pub restarts: usize,
    /// Local models per annealing restart.
    pub models: usize,
    /// Relative scale of the Gaussian perturbation of the baseline model
    /// used to initialize every annealed restart.
    pub init_spread: f64,
    pub refine_tol: f64,
    pub refine_max_rounds: usize,
    /// Relative tolerance on the matched power in power-target mode.
    pub power_tol: f64,
}

impl AnnealSchedule {
    pub fn for_mode(mode: Mode) -> Self {
        AnnealSchedule {
            t_init_scale: 1e-2,
            alpha: 0.95,
            t_min_ratio: 1e-5,
            max_outer: 400,
            inner_tol: 1e-5,
            inner_max: 200,
            restarts: 4,
            models: match mode {
                Mode::OneToOne => 16,
                Mode::TwoToOne => 24,
            },
            init_spread: 1.0,
            refine_tol: 1e-7,
            refine_max_rounds: 500,
            power_tol: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.t_init_scale) || !pos(self.t_min_ratio) || !pos(self.inner_tol) || !pos(self.refine_tol) || !pos(self.power_tol) || !pos(self.init_spread) {
            return Err(Error::Config("schedule scales and tolerances must be positive".into()));
        }
        if self.restarts == 0 || self.models == 0 || self.inner_max == 0 || self.max_outer == 0 {
            return Err(Error::Config("restarts, models, inner_max and max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule::for_mode(Mode::OneToOne)
    }
}

/// Affine local model `u_i = slope_i · x + offset_i` for both channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalModel<const D: usize> {
    pub slope: [[f64; D]; 2],
    pub offset: [f64; 2],
}

impl LocalModel<1> {
    pub fn affine(a1: f64, b1: f64, a2: f64, b2: f64) -> Self {
        LocalModel { slope: [[a1], [a2]], offset: [b1, b2] }
    }
}

impl<const D: usize> LocalModel<D> {
    pub fn apply(&self, x: &[f64; D]) -> [f64; 2] {
        [0, 1].map(|i| {
            let mut u = self.offset[i];
            for d in 0..D {
                u += self.slope[i][d] * x[d];
            }
            u
        })
    }

    pub(crate) const N_PARAMS: usize = 2 * (D + 1);

    /// Parameter layout: `[slope_1.., offset_1, slope_2.., offset_2]`.
    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(Self::N_PARAMS);
        for i in 0..2 {
            p.extend_from_slice(&self.slope[i]);
            p.push(self.offset[i]);
        }
        p
    }

    pub(crate) fn from_params(p: &[f64]) -> Self {
        let mut m = LocalModel { slope: [[0.0; D]; 2], offset: [0.0; 2] };
        for i in 0..2 {
            let base = i * (D + 1);
            m.slope[i].copy_from_slice(&p[base..base + D]);
            m.offset[i] = p[base + D];
        }
        m
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalModelSet<const D: usize> {
    pub models: Vec<LocalModel<D>>,
}

impl<const D: usize> LocalModelSet<D> {
    pub fn new(models: Vec<LocalModel<D>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Contract("a model set needs at least one model".into()));
        }
        if models.iter().any(|m| !m.is_finite()) {
            return Err(Error::Contract("model parameters must be finite".into()));
        }
        Ok(LocalModelSet { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// `base` perturbed by zero-mean Gaussian noise at relative scale `rel`.
    pub fn perturbed(base: &LocalModel<D>, count: usize, rel: f64, source_sd: f64, rng: &mut ChaCha8Rng) -> Self {
        let models = (0..count)
            .map(|_| {
                let mut m = *base;
                for i in 0..2 {
                    let norm = m.slope[i].iter().map(|s| s * s).sum::<f64>().sqrt();
                    let scale = if norm > 0.0 { norm * source_sd } else { source_sd };
                    for d in 0..D {
                        let n: f64 = StandardNormal.sample(rng);
                        m.slope[i][d] *= 1.0 + rel * n;
                    }
                    let n: f64 = StandardNormal.sample(rng);
                    m.offset[i] += rel * scale * n;
                }
                m
            })
            .collect();
        LocalModelSet { models }
    }
}

/// Soft partition `q(m|k)`, row-major over (source point, model).
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    n_points: usize,
    n_models: usize,
    q: Vec<f64>,
}

impl Association {
    pub fn uniform(n_points: usize, n_models: usize) -> Self {
        Association { n_points, n_models, q: vec![1.0 / n_models as f64; n_points * n_models] }
    }

    pub fn from_table(n_points: usize, n_models: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != n_points * n_models || n_models == 0 {
            return Err(Error::Contract("association table has the wrong shape".into()));
        }
        let a = Association { n_points, n_models, q };
        if a.max_row_error() > 1e-10 || a.q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("association rows must be probability vectors".into()));
        }
        Ok(a)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn get(&self, k: usize, m: usize) -> f64 {
        self.q[k * self.n_models + m]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.q[k * self.n_models..(k + 1) * self.n_models]
    }

    pub fn table(&self) -> &[f64] {
        &self.q
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.q.chunks(self.n_models).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `-Σ_k p_k Σ_m q log q`.
    pub fn entropy(&self, weights: &[f64]) -> f64 {
        let rows: Vec<f64> = self
            .q
            .chunks(self.n_models)
            .zip(weights)
            .map(|(r, p)| -p * r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .collect();
        pairwise_sum(&rows)
    }
}

/// `q(m|k) ∝ exp(-(c(k,m) - min_m c(k,·)) / T)` for a row-major cost table.
pub fn gibbs_associations(costs: &[f64], n_models: usize, temperature: f64) -> Result<Association> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    if n_models == 0 || costs.len() % n_models != 0 {
        return Err(Error::Contract("cost table shape does not match the model count".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract("costs must be finite".into()));
    }
    let mut q = Vec::with_capacity(costs.len());
    for row in costs.chunks(n_models) {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = row.iter().map(|c| (-(c - min) / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        q.extend(e.into_iter().map(|v| v / s));
    }
    Ok(Association { n_points: costs.len() / n_models, n_models, q })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnealTrace {
    pub temperature: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub cost_j: Vec<f64>,
    pub hardened_j: Vec<f64>,
    pub entropy: Vec<f64>,
    /// Free energy after each block update of every inner iteration, per outer step.
    pub inner_free_energy: Vec<Vec<f64>>,
    /// Outer steps whose parameter line search made no progress.
    pub stalls: usize,
}

impl AnnealTrace {
    pub fn len(&self) -> usize {
        self.temperature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperature.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,temperature,free_energy,cost_j,entropy\n");
        for i in 0..self.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                fmt_num(self.temperature[i]),
                fmt_num(self.free_energy[i]),
                fmt_num(self.cost_j[i]),
                fmt_num(self.entropy[i])
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// generic machinery shared with the 2:1 system

/// The source alphabet and system a design runs against.
#[derive(Clone, Copy)]
pub(crate) struct Problem<'a, const D: usize> {
    pub points: &'a [[f64; D]],
    pub weights: &'a [f64],
    pub cfg: &'a SystemConfig,
    pub spec: &'a GridSpec,
}

/// Per-atom cost with derivatives in the (true) channel inputs.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct AtomCost {
    pub cost: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

pub(crate) type Coverage = [(f64, f64); 2];

fn clamp_u(u: [f64; 2], cov: &Coverage) -> [f64; 2] {
    [u[0].clamp(cov[0].0, cov[0].1), u[1].clamp(cov[1].0, cov[1].1)]
}

fn inside(u: [f64; 2], cov: &Coverage) -> bool {
    (0..2).all(|i| u[i] >= cov[i].0 && u[i] <= cov[i].1)
}

pub(crate) fn coverage_of(grids: &[ChannelGrid; 2], noise_variance: [f64; 2]) -> Coverage {
    [0, 1].map(|i| {
        let m = 4.0 * noise_variance[i].sqrt();
        (grids[i].min() + m, grids[i].max() - m)
    })
}

/// Cost of one atom. Inputs outside the grid coverage contribute the
/// distortion of the nearest covered input plus their exact power.
fn atom_cost<const D: usize>(x: &[f64; D], u: [f64; 2], dec: &Decoders<D>, cov: &Coverage, w: CostWeights, order: Order) -> AtomCost {
    if inside(u, cov) {
        let e = point_eval(x, u, dec, order);
        AtomCost { cost: e.cost(w, u), grad: e.grad(w, u), hess: e.hess(w) }
    } else {
        let e = point_eval(x, clamp_u(u, cov), dec, Order::Value);
        let d = (1.0 - w.epsilon) * e.central + w.epsilon * (e.side[0] + e.side[1]);
        AtomCost {
            cost: d + w.lambda * (u[0] * u[0] + u[1] * u[1]),
            grad: [2.0 * w.lambda * u[0], 2.0 * w.lambda * u[1]],
            hess: [[2.0 * w.lambda, 0.0], [0.0, 2.0 * w.lambda]],
        }
    }
}

pub(crate) fn cost_table<const D: usize>(
    pb: &Problem<D>,
    models: &[LocalModel<D>],
    dec: &Decoders<D>,
    cov: &Coverage,
    order: Order,
) -> Vec<AtomCost> {
    let w = pb.cfg.cost_weights();
    let rows: Vec<Vec<AtomCost>> = pb.spec.exec.map(pb.points.len(), |k| {
        models.iter().map(|m| atom_cost(&pb.points[k], m.apply(&pb.points[k]), dec, cov, w, order)).collect()
    });
    rows.into_iter().flatten().collect()
}

pub(crate) fn soft_cost(weights: &[f64], q: &Association, costs: &[AtomCost]) -> f64 {
    let m = q.n_models;
    let rows: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(k, p)| p * (0..m).map(|j| q.q[k * m + j] * costs[k * m + j].cost).sum::<f64>())
        .collect();
    pairwise_sum(&rows)
}

fn randomized_atoms<const D: usize>(pb: &Problem<D>, models: &[LocalModel<D>], q: &Association, cov: Option<&Coverage>) -> Vec<Atom<D>> {
    let mut atoms = Vec::with_capacity(pb.points.len() * models.len());
    for (k, x) in pb.points.iter().enumerate() {
        for (m, model) in models.iter().enumerate() {
            let u = model.apply(x);
            let u = cov.map_or(u, |c| clamp_u(u, c));
            atoms.push(Atom { weight: pb.weights[k] * q.get(k, m), x: *x, u });
        }
    }
    atoms
}

fn active_extent<const D: usize>(pb: &Problem<D>, models: &[LocalModel<D>], q: &Association) -> [f64; 2] {
    let mut ext = [0.0f64; 2];
    for (k, x) in pb.points.iter().enumerate() {
        for (m, model) in models.iter().enumerate() {
            if q.get(k, m) >= ACTIVE_Q {
                let u = model.apply(x);
                ext[0] = ext[0].max(u[0].abs());
                ext[1] = ext[1].max(u[1].abs());
            }
        }
    }
    ext
}

/// Per-model Newton-preconditioned descent direction in parameter space.
fn model_directions<const D: usize>(pb: &Problem<D>, models: &[LocalModel<D>], q: &Association, costs: &[AtomCost]) -> Vec<Vec<f64>> {
    let n = LocalModel::<D>::N_PARAMS;
    let mm = models.len();
    (0..mm)
        .map(|m| {
            let mut g = DVector::<f64>::zeros(n);
            let mut h = DMatrix::<f64>::zeros(n, n);
            let mut mass = 0.0;
            for (k, x) in pb.points.iter().enumerate() {
                let w = pb.weights[k] * q.get(k, m);
                if w == 0.0 {
                    continue;
                }
                mass += w;
                let c = &costs[k * mm + m];
                // du_i/dθ: x for the slopes, 1 for the offset of channel i
                let mut jac = [[0.0; 8]; 2];
                for i in 0..2 {
                    let base = i * (D + 1);
                    jac[i][base..base + D].copy_from_slice(x);
                    jac[i][base + D] = 1.0;
                }
                for a in 0..n {
                    g[a] += w * (c.grad[0] * jac[0][a] + c.grad[1] * jac[1][a]);
                    for b in 0..n {
                        let mut s = 0.0;
                        for i in 0..2 {
                            for j in 0..2 {
                                s += jac[i][a] * c.hess[i][j] * jac[j][b];
                            }
                        }
                        h[(a, b)] += w * s;
                    }
                }
            }
            if mass < 1e-14 {
                return vec![0.0; n];
            }
            damped_newton(h, g)
        })
        .collect()
}

/// Solves `(H + μI) d = -g` with the smallest tried `μ` that makes the system positive definite.
fn damped_newton(h: DMatrix<f64>, g: DVector<f64>) -> Vec<f64> {
    let n = g.len();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut mu = 0.0;
    for _ in 0..30 {
        let mut a = h.clone();
        for i in 0..n {
            a[(i, i)] += mu;
        }
        if let Some(ch) = a.cholesky() {
            let d = ch.solve(&(-&g));
            if d.iter().all(|v| v.is_finite()) {
                return d.iter().copied().collect();
            }
        }
        mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
    }
    (-&g / scale).iter().copied().collect()
}

fn apply_step<const D: usize>(models: &[LocalModel<D>], dirs: &[Vec<f64>], alpha: f64) -> Vec<LocalModel<D>> {
    models
        .iter()
        .zip(dirs)
        .map(|(m, d)| {
            let p: Vec<f64> = m.params().iter().zip(d).map(|(a, b)| a + alpha * b).collect();
            LocalModel::from_params(&p)
        })
        .collect()
}

pub(crate) struct ModelStep<const D: usize> {
    pub models: Vec<LocalModel<D>>,
    /// Cost table (value order) at the returned models.
    pub costs: Vec<AtomCost>,
    pub soft_before: f64,
    pub soft_after: f64,
    pub stalled: bool,
}

/// One line-searched step on the model parameters with `q` and decoders fixed.
pub(crate) fn step_models<const D: usize>(
    pb: &Problem<D>,
    models: &[LocalModel<D>],
    q: &Association,
    dec: &Decoders<D>,
    cov: &Coverage,
    costs: &[AtomCost],
) -> ModelStep<D> {
    let before = soft_cost(pb.weights, q, costs);
    let mut dirs = model_directions(pb, models, q, costs);
    // trust region on the channel-input displacement of active atoms
    let sd = pb.cfg.noise_variances().map(f64::sqrt);
    let mut max_move = [0.0f64; 2];
    for (k, x) in pb.points.iter().enumerate() {
        for (m, d) in dirs.iter().enumerate() {
            if q.get(k, m) >= ACTIVE_Q {
                let dm = LocalModel::<D>::from_params(d);
                let du = dm.apply(x);
                max_move[0] = max_move[0].max(du[0].abs() / sd[0]);
                max_move[1] = max_move[1].max(du[1].abs() / sd[1]);
            }
        }
    }
    let worst = max_move[0].max(max_move[1]);
    if worst > TRUST_SD {
        let s = TRUST_SD / worst;
        dirs.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v *= s));
    }
    let mut alpha = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let trial = apply_step(models, &dirs, alpha);
        let covered = pb.points.iter().enumerate().all(|(k, x)| {
            trial.iter().enumerate().all(|(m, model)| q.get(k, m) < ACTIVE_Q || inside(model.apply(x), cov))
        });
        if covered && trial.iter().all(|m| m.is_finite()) {
            let tc = cost_table(pb, &trial, dec, cov, Order::Value);
            let after = soft_cost(pb.weights, q, &tc);
            if after < before {
                return ModelStep { models: trial, costs: tc, soft_before: before, soft_after: after, stalled: false };
            }
        }
        alpha *= 0.5;
    }
    ModelStep { models: models.to_vec(), costs: costs.to_vec(), soft_before: before, soft_after: before, stalled: true }
}

fn harden<const D: usize>(pb: &Problem<D>, models: &[LocalModel<D>], costs: &[AtomCost]) -> (Vec<f64>, Vec<f64>) {
    let mm = models.len();
    let mut g1 = Vec::with_capacity(pb.points.len());
    let mut g2 = Vec::with_capacity(pb.points.len());
    for (k, x) in pb.points.iter().enumerate() {
        let mut best = 0;
        for m in 1..mm {
            // strict comparison keeps the lowest index on ties
            if costs[k * mm + m].cost < costs[k * mm + best].cost {
                best = m;
            }
        }
        let u = models[best].apply(x);
        g1.push(u[0]);
        g2.push(u[1]);
    }
    (g1, g2)
}

/// Grids, exact MMSE decoders and metrics for a deterministic encoder.
pub(crate) fn evaluate_encoder<const D: usize>(pb: &Problem<D>, g1: &[f64], g2: &[f64], order: Order) -> Result<(Metrics, Decoders<D>, Vec<PointEval>)> {
    let enc = Encoded { points: pb.points, weights: pb.weights, g1, g2 };
    let grids = pb.spec.grids_for([enc.max_abs(0), enc.max_abs(1)], pb.cfg.noise_variances())?;
    let dec = build_decoders(&enc.atoms(), grids, pb.cfg.noise_variances(), 0.0, pb.spec.exec);
    enc.check_coverage(&dec)?;
    let evals = enc.point_evals(&dec, order, pb.spec.exec);
    let m = enc.metrics_from(&evals, pb.cfg.epsilon, pb.cfg.lambda, pb.cfg.source_variance);
    Ok((m, dec, evals))
}

pub(crate) struct AnnealRun {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub trace: AnnealTrace,
}

/// The temperature loop for one restart. Returns the best hardened snapshot.
pub(crate) fn anneal_run<const D: usize>(pb: &Problem<D>, init: Vec<LocalModel<D>>, schedule: &AnnealSchedule) -> Result<AnnealRun> {
    let nv = pb.cfg.noise_variances();
    let mm = init.len();
    let mut models = init;
    let mut q = Association::uniform(pb.points.len(), mm);
    let mut trace = AnnealTrace::default();

    let build = |models: &[LocalModel<D>], q: &Association, grids: &[ChannelGrid; 2]| {
        let cov = coverage_of(grids, nv);
        let atoms = randomized_atoms(pb, models, q, Some(&cov));
        (build_decoders(&atoms, grids.clone(), nv, ANNEAL_PRUNE, pb.spec.exec), cov)
    };

    let mut grids = pb.spec.grids_for(active_extent(pb, &models, &q), nv)?;
    let (dec, cov) = build(&models, &q, &grids);
    let mut costs = cost_table(pb, &models, &dec, &cov, Order::Value);
    let mean = soft_cost(pb.weights, &q, &costs);
    let var = {
        let rows: Vec<f64> = (0..pb.points.len())
            .map(|k| pb.weights[k] * (0..mm).map(|m| q.get(k, m) * (costs[k * mm + m].cost - mean).powi(2)).sum::<f64>())
            .collect();
        pairwise_sum(&rows)
    };
    let t0 = schedule.t_init_scale * if var > 0.0 { var } else { mean.abs().max(1e-12) };

    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Metrics)> = None;
    for step in 0..schedule.max_outer {
        let t = t0 * schedule.alpha.powi(step as i32);
        if t < schedule.t_min_ratio * t0 {
            break;
        }
        if step > 0 {
            grids = pb.spec.grids_for(active_extent(pb, &models, &q), nv)?;
        }
        let mut inner = Vec::new();
        let mut f_end = f64::NAN;
        let mut stalled_step = false;
        // Both the decoder rebuild and the Gibbs update are exact minimizers,
        // so they are only rejected when round-off makes them a hair worse.
        let mut held: Option<(Decoders<D>, Coverage)> = None;
        for _ in 0..schedule.inner_max {
            let h = q.entropy(pb.weights);
            let (mut dec, mut cov) = build(&models, &q, &grids);
            let mut full = cost_table(pb, &models, &dec, &cov, Order::Hessian);
            let mut f_a = soft_cost(pb.weights, &q, &full) - t * h;
            if let Some((d, c)) = held.take().filter(|_| f_a > f_end) {
                (dec, cov) = (d, c);
                full = cost_table(pb, &models, &dec, &cov, Order::Hessian);
                f_a = soft_cost(pb.weights, &q, &full) - t * h;
            }
            let flat: Vec<f64> = full.iter().map(|c| c.cost).collect();
            let q_new = gibbs_associations(&flat, mm, t)?;
            let h_new = q_new.entropy(pb.weights);
            let f_new = soft_cost(pb.weights, &q_new, &full) - t * h_new;
            let (h, f_b) = if f_new <= f_a {
                q = q_new;
                (h_new, f_new)
            } else {
                (h, f_a)
            };
            let st = step_models(pb, &models, &q, &dec, &cov, &full);
            let f_c = st.soft_after - t * h;
            stalled_step |= st.stalled;
            models = st.models;
            costs = st.costs;
            inner.extend([f_a, f_b, f_c]);
            f_end = f_c;
            held = Some((dec, cov));
            if (f_a - f_c).abs() <= schedule.inner_tol * f_c.abs() {
                break;
            }
        }
        trace.stalls += stalled_step as usize;
        let (hg1, hg2) = harden(pb, &models, &costs);
        let (hm, _, _) = evaluate_encoder(pb, &hg1, &hg2, Order::Value)?;
        if best.as_ref().is_none_or(|b| hm.j_cost < b.0) {
            best = Some((hm.j_cost, hg1, hg2, hm));
        }
        trace.temperature.push(t);
        trace.free_energy.push(f_end);
        trace.cost_j.push(soft_cost(pb.weights, &q, &costs));
        trace.hardened_j.push(hm.j_cost);
        trace.entropy.push(q.entropy(pb.weights));
        trace.inner_free_energy.push(inner);
    }
    let (_, g1, g2, _) = best.ok_or_else(|| Error::Config("annealing schedule ran no temperature steps".into()))?;
    Ok(AnnealRun { g1, g2, trace })
}

pub(crate) struct Refined {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub metrics: Metrics,
    pub rounds: usize,
    pub stalled: bool,
}

/// Newton-preconditioned per-point direction for a 2×2 cost model.
fn point_direction(grad: [f64; 2], h: [[f64; 2]; 2], cap: f64) -> [f64; 2] {
    let (a, b, c) = (h[0][0], h[0][1], h[1][1]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lmin, lmax) = (mid - rad, mid + rad);
    let floor = (1e-3 * lmax.abs().max(lmin.abs())).max(1e-12);
    let mu = (floor - lmin).max(0.0);
    let (a, c) = (a + mu, c + mu);
    let det = a * c - b * b;
    let mut d = [-(c * grad[0] - b * grad[1]) / det, -(a * grad[1] - b * grad[0]) / det];
    if !d.iter().all(|v| v.is_finite()) {
        d = [0.0, 0.0];
    }
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if norm > cap {
        d = d.map(|v| v * cap / norm);
    }
    d
}

/// Alternates MMSE decoders with a line-searched step on every `g(x_k)`.
pub(crate) fn refine<const D: usize>(pb: &Problem<D>, g1: &[f64], g2: &[f64], tol: f64, max_rounds: usize) -> Result<Refined> {
    let w = pb.cfg.cost_weights();
    let cap = pb.cfg.noise_variances().iter().fold(f64::INFINITY, |m, v| m.min(v.sqrt()));
    let mut cur = (g1.to_vec(), g2.to_vec());
    let (mut metrics, mut dec, mut evals) = evaluate_encoder(pb, &cur.0, &cur.1, Order::Hessian)?;
    let mut stalled = false;
    let mut rounds = 0;
    for _ in 0..max_rounds {
        let j = metrics.j_cost;
        let dirs: Vec<[f64; 2]> = evals
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let u = [cur.0[k], cur.1[k]];
                point_direction(e.grad(w, u), e.hess(w), cap)
            })
            .collect();
        let cov = coverage_of(&dec.grids, dec.noise_variance);
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let t1: Vec<f64> = cur.0.iter().zip(&dirs).map(|(g, d)| g + alpha * d[0]).collect();
            let t2: Vec<f64> = cur.1.iter().zip(&dirs).map(|(g, d)| g + alpha * d[1]).collect();
            if t1.iter().zip(&t2).all(|(&a, &b)| inside([a, b], &cov)) {
                let enc = Encoded { points: pb.points, weights: pb.weights, g1: &t1, g2: &t2 };
                let te = enc.point_evals(&dec, Order::Value, pb.spec.exec);
                let tj = enc.metrics_from(&te, w.epsilon, w.lambda, pb.cfg.source_variance).j_cost;
                if tj < j {
                    accepted = Some((t1, t2));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            stalled = true;
            break;
        };
        let (nm, nd, ne) = evaluate_encoder(pb, &next.0, &next.1, Order::Hessian)?;
        if !(nm.j_cost < j) || (j - nm.j_cost) < tol * j.abs() {
            break;
        }
        rounds += 1;
        cur = next;
        metrics = nm;
        dec = nd;
        evals = ne;
    }
    Ok(Refined { g1: cur.0, g2: cur.1, metrics, rounds, stalled })
}

/// Where a design candidate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Restart(usize),
    /// A caller-supplied warm start (e.g. the previous point of a sweep).
    Seeded(usize),
}

#[derive(Clone, Debug)]
pub(crate) struct Candidate {
    pub origin: Origin,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub metrics: Metrics,
}

pub(crate) struct Design<const D: usize> {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub metrics: Metrics,
    pub trace: AnnealTrace,
    pub origin: Origin,
    pub lambda: f64,
    /// Metrics of the baseline mapping at the final multiplier.
    pub baseline: Metrics,
    /// Final metrics of every candidate at the final multiplier.
    pub candidates: Vec<(Origin, Metrics)>,
}

pub(crate) struct DesignInputs<'a, const D: usize> {
    pub points: &'a [[f64; D]],
    pub weights: &'a [f64],
    pub cfg: &'a SystemConfig,
    pub spec: &'a GridSpec,
    pub schedule: &'a AnnealSchedule,
    pub seed: u64,
    /// Single-model start that reproduces the baseline scheme.
    pub baseline_model: LocalModel<D>,
    /// Multiplier at which the baseline is stationary for the power target.
    pub baseline_lambda: f64,
    pub seeded: &'a [(Vec<f64>, Vec<f64>)],
}

/// Runs every restart, refines, and (in power-target mode) searches λ.
pub(crate) fn design<const D: usize>(inp: &DesignInputs<D>) -> Result<Design<D>> {
    inp.cfg.validate()?;
    inp.schedule.validate()?;
    let lambda_a = if inp.cfg.power_target.is_some() { inp.baseline_lambda } else { inp.cfg.lambda };
    let cfg_a = inp.cfg.clone().with_lambda(lambda_a);
    let pb = Problem { points: inp.points, weights: inp.weights, cfg: &cfg_a, spec: inp.spec };
    let sched = inp.schedule;
    let source_sd = inp.cfg.source_variance.sqrt();

    // restarts are independent; each draws from its own stream of the seed
    let runs: Vec<Result<(Candidate, AnnealTrace)>> = inp.spec.exec.map(sched.restarts, |r| {
        let init = if r == 0 {
            vec![inp.baseline_model]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
            rng.set_stream(r as u64);
            LocalModelSet::perturbed(&inp.baseline_model, sched.models, sched.init_spread, source_sd, &mut rng).models
        };
        let run = anneal_run(&pb, init, sched)?;
        let rf = refine(&pb, &run.g1, &run.g2, sched.refine_tol, sched.refine_max_rounds)?;
        Ok((Candidate { origin: Origin::Restart(r), g1: rf.g1, g2: rf.g2, metrics: rf.metrics }, run.trace))
    });
    let mut candidates = Vec::new();
    let mut traces = Vec::new();
    for run in runs {
        let (c, t) = run?;
        candidates.push(c);
        traces.push(t);
    }
    for (i, (g1, g2)) in inp.seeded.iter().enumerate() {
        let rf = refine(&pb, g1, g2, sched.refine_tol, sched.refine_max_rounds)?;
        candidates.push(Candidate { origin: Origin::Seeded(i), g1: rf.g1, g2: rf.g2, metrics: rf.metrics });
    }
    let baseline_map = {
        let m = inp.baseline_model;
        let u: Vec<[f64; 2]> = inp.points.iter().map(|x| m.apply(x)).collect();
        (u.iter().map(|v| v[0]).collect::<Vec<_>>(), u.iter().map(|v| v[1]).collect::<Vec<_>>())
    };

    let pick = |cands: &[Candidate]| {
        let mut best = 0;
        for i in 1..cands.len() {
            if cands[i].metrics.j_cost < cands[best].metrics.j_cost {
                best = i;
            }
        }
        best
    };

    let (final_cands, lambda) = match inp.cfg.power_target {
        None => (candidates, lambda_a),
        Some(target) => {
            // Only the baseline start and the best few annealed candidates are
            // carried into the search. Every evaluation restarts from the same
            // points, so P(λ) is a pure function of λ.
            let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].origin != Origin::Restart(0)).collect();
            order.sort_by(|&a, &b| candidates[a].metrics.j_cost.total_cmp(&candidates[b].metrics.j_cost).then(a.cmp(&b)));
            order.truncate(SEARCH_KEEP);
            order.insert(0, 0);
            let kept: Vec<&Candidate> = order.iter().map(|&i| &candidates[i]).collect();
            let at = |lambda: f64| -> Result<Vec<Candidate>> {
                let cfg = inp.cfg.clone().with_lambda(lambda);
                let pb = Problem { points: inp.points, weights: inp.weights, cfg: &cfg, spec: inp.spec };
                let out: Vec<Result<Candidate>> = inp.spec.exec.map(kept.len(), |i| {
                    let c = kept[i];
                    let start = if c.origin == Origin::Restart(0) { (&baseline_map.0, &baseline_map.1) } else { (&c.g1, &c.g2) };
                    let rf = refine(&pb, start.0, start.1, sched.refine_tol, sched.refine_max_rounds)?;
                    Ok(Candidate { origin: c.origin, g1: rf.g1, g2: rf.g2, metrics: rf.metrics })
                });
                out.into_iter().collect()
            };
            search_lambda(target, lambda_a, sched.power_tol, |l| {
                let cs = at(l)?;
                let p = cs[pick(&cs)].metrics.max_power();
                Ok((p, cs))
            })?
        }
    };
    let best = pick(&final_cands);
    let chosen = &final_cands[best];
    let trace = match chosen.origin {
        Origin::Restart(r) => traces[r].clone(),
        Origin::Seeded(_) => {
            // report the best annealed run when a warm start wins
            let r = (0..traces.len())
                .min_by(|&a, &b| {
                    let ja = traces[a].hardened_j.iter().copied().fold(f64::INFINITY, f64::min);
                    let jb = traces[b].hardened_j.iter().copied().fold(f64::INFINITY, f64::min);
                    ja.total_cmp(&jb)
                })
                .unwrap_or(0);
            traces[r].clone()
        }
    };
    let cfg_f = inp.cfg.clone().with_lambda(lambda);
    let pb_f = Problem { points: inp.points, weights: inp.weights, cfg: &cfg_f, spec: inp.spec };
    let (baseline, _, _) = evaluate_encoder(&pb_f, &baseline_map.0, &baseline_map.1, Order::Value)?;
    Ok(Design {
        g1: chosen.g1.clone(),
        g2: chosen.g2.clone(),
        metrics: chosen.metrics,
        trace,
        origin: chosen.origin,
        lambda,
        baseline,
        candidates: final_cands.iter().map(|c| (c.origin, c.metrics)).collect(),
    })
}

/// Geometric bisection of λ on `[1e-6, 1e3]` so that `power(λ)` meets `target`.
///
/// `power` is assumed non-increasing in λ; the bracket is first grown from
/// `start` by factors of 4. If no evaluation lands within `tol`, the closest
/// one is returned.
fn search_lambda<T>(target: f64, start: f64, tol: f64, mut power: impl FnMut(f64) -> Result<(f64, T)>) -> Result<(T, f64)> {
    const LO: f64 = 1e-6;
    const HI: f64 = 1e3;
    const MAX_EVALS: usize = 40;
    let mut best: Option<(f64, f64, T)> = None;
    let mut evals = 0;
    let mut record = |l: f64, evals: &mut usize, best: &mut Option<(f64, f64, T)>| -> Result<f64> {
        let (p, v) = power(l)?;
        *evals += 1;
        let miss = (p / target - 1.0).abs();
        if best.as_ref().is_none_or(|b| miss < b.0) {
            *best = Some((miss, l, v));
        }
        Ok(p)
    };
    let done = |best: &Option<(f64, f64, T)>| best.as_ref().is_some_and(|b| b.0 <= tol);

    let start = start.clamp(LO, HI);
    let p0 = record(start, &mut evals, &mut best)?;
    let (mut lo, mut hi) = (None, None);
    if p0 > target {
        lo = Some(start);
    } else {
        hi = Some(start);
    }
    let mut probe = start;
    while !done(&best) && evals < MAX_EVALS && (lo.is_none() || hi.is_none()) {
        probe = if lo.is_none() { (probe / 4.0).max(LO) } else { (probe * 4.0).min(HI) };
        let p = record(probe, &mut evals, &mut best)?;
        if p > target {
            lo = Some(probe);
        } else {
            hi = Some(probe);
        }
        if (probe == LO && lo.is_none()) || (probe == HI && hi.is_none()) {
            break;
        }
    }
    if let (Some(mut l), Some(mut h)) = (lo, hi) {
        while !done(&best) && evals < MAX_EVALS {
            let mid = (l * h).sqrt();
            let p = record(mid, &mut evals, &mut best)?;
            if p > target {
                l = mid;
            } else {
                h = mid;
            }
        }
    }
    let (_, l, v) = best.expect("at least one evaluation");
    Ok((v, l))
}

// ---------------------------------------------------------------------------
// scalar (1:1) operations

fn scalar_problem_points(grid: &SourceGrid) -> Vec<[f64; 1]> {
    grid.points().iter().map(|&x| [x]).collect()
}

/// `c(k, m)`: expected cost of sending source point `k` through model `m`.
pub fn per_point_model_cost(
    k: usize,
    m: usize,
    models: &LocalModelSet<1>,
    grid: &SourceGrid,
    decoders: &DecoderTable,
    cfg: &SystemConfig,
) -> Result<f64> {
    let x = [*grid.points().get(k).ok_or_else(|| Error::Contract(format!("point index {k} out of range")))?];
    let model = models.models.get(m).ok_or_else(|| Error::Contract(format!("model index {m} out of range")))?;
    let u = model.apply(&x);
    if !decoders.covers(u) {
        return Err(Error::Evaluation(format!("channel inputs {u:?} outside decoder grid coverage")));
    }
    Ok(point_eval(&x, u, decoders, Order::Value).cost(cfg.cost_weights(), u))
}

/// Row-major `c(k, m)` table for every source point and model.
pub fn model_cost_table(models: &LocalModelSet<1>, grid: &SourceGrid, decoders: &DecoderTable, cfg: &SystemConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.len() * models.len());
    for k in 0..grid.len() {
        for m in 0..models.len() {
            out.push(per_point_model_cost(k, m, models, grid, decoders, cfg)?);
        }
    }
    Ok(out)
}

/// Outcome of [`update_models`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelUpdate {
    pub models: LocalModelSet<1>,
    /// `Σ_k p_k Σ_m q(m|k) c(k, m)` before and after the step.
    pub cost_before: f64,
    pub cost_after: f64,
    pub stalled: bool,
}

/// One line-searched descent step on the affine parameters, holding the
/// associations and decoders fixed. With `q` fixed the entropy term of the
/// free energy is constant, so the step lowers `F` exactly when it lowers
/// the expected cost.
pub fn update_models(
    models: &LocalModelSet<1>,
    assoc: &Association,
    decoders: &DecoderTable,
    grid: &SourceGrid,
    cfg: &SystemConfig,
) -> Result<ModelUpdate> {
    if assoc.n_models != models.len() || assoc.n_points != grid.len() {
        return Err(Error::Contract("association shape does not match models and grid".into()));
    }
    let pts = scalar_problem_points(grid);
    let spec = GridSpec { exec: Exec::default(), ..GridSpec::default() };
    let pb = Problem { points: &pts, weights: grid.weights(), cfg, spec: &spec };
    let cov = coverage_of(&decoders.grids, decoders.noise_variance);
    let costs = cost_table(&pb, &models.models, decoders, &cov, Order::Hessian);
    let st = step_models(&pb, &models.models, assoc, decoders, &cov, &costs);
    Ok(ModelUpdate {
        models: LocalModelSet { models: st.models },
        cost_before: st.soft_before,
        cost_after: st.soft_after,
        stalled: st.stalled,
    })
}

/// Analytic gradient of `Σ_k p_k Σ_m q(m|k) c(k, m)` in every model parameter,
/// laid out per model as `[a1, b1, a2, b2]`.
pub fn model_gradient(models: &LocalModelSet<1>, assoc: &Association, decoders: &DecoderTable, grid: &SourceGrid, cfg: &SystemConfig) -> Vec<[f64; 4]> {
    let pts = scalar_problem_points(grid);
    model_grad(&pts, grid.weights(), &models.models, assoc, decoders, cfg)
        .into_iter()
        .map(|g| [g[0], g[1], g[2], g[3]])
        .collect()
}

pub(crate) fn model_grad<const D: usize>(
    points: &[[f64; D]],
    weights: &[f64],
    models: &[LocalModel<D>],
    assoc: &Association,
    dec: &Decoders<D>,
    cfg: &SystemConfig,
) -> Vec<Vec<f64>> {
    let w = cfg.cost_weights();
    let mut out = vec![vec![0.0; LocalModel::<D>::N_PARAMS]; models.len()];
    for (k, (x, &p)) in points.iter().zip(weights).enumerate() {
        for (m, model) in models.iter().enumerate() {
            let u = model.apply(x);
            let g = point_eval(x, u, dec, Order::Gradient).grad(w, u);
            let s = p * assoc.get(k, m);
            for i in 0..2 {
                let base = i * (D + 1);
                for d in 0..D {
                    out[m][base + d] += s * g[i] * x[d];
                }
                out[m][base + D] += s * g[i];
            }
        }
    }
    out
}

/// Result of a full design run.
#[derive(Clone, Debug)]
pub struct AnnealOutcome {
    pub mapping: ScalarMapping,
    pub metrics: Metrics,
    pub trace: AnnealTrace,
    pub origin: Origin,
    /// Multiplier of the returned design (searched in power-target mode).
    pub lambda: f64,
    /// The linear scheme at the power target (or unit slope-scaled start) under `lambda`.
    pub baseline: Metrics,
    pub candidates: Vec<(Origin, Metrics)>,
}

/// Slope of the linear encoder with per-channel power `p`.
pub(crate) fn linear_slope(p: f64, source_variance: f64) -> f64 {
    (p / source_variance).sqrt()
}

/// Multiplier at which the linear scheme with per-channel power `p` is
/// stationary: `λ = -∂D/∂P_1`, averaged over the two channels.
pub fn linear_stationary_lambda(cfg: &SystemConfig, p: f64) -> f64 {
    let s2 = cfg.source_variance;
    let [v1, v2] = cfg.noise_variances();
    let snr = 1.0 + p / v1 + p / v2;
    let e = cfg.epsilon;
    let d1 = (1.0 - e) * s2 / v1 / (snr * snr) + e * s2 * v1 / ((v1 + p) * (v1 + p));
    let d2 = (1.0 - e) * s2 / v2 / (snr * snr) + e * s2 * v2 / ((v2 + p) * (v2 + p));
    0.5 * (d1 + d2)
}

/// Deterministic-annealing design of a 1:1 encoder pair.
pub fn anneal(cfg: &SystemConfig, schedule: &AnnealSchedule, spec: &GridSpec, seed: u64) -> Result<(ScalarMapping, Metrics, AnnealTrace)> {
    let out = anneal_with(cfg, schedule, spec, seed, &[])?;
    Ok((out.mapping, out.metrics, out.trace))
}

/// [`anneal`] with extra warm-start mappings added to the candidate set.
pub fn anneal_with(cfg: &SystemConfig, schedule: &AnnealSchedule, spec: &GridSpec, seed: u64, seeded: &[ScalarMapping]) -> Result<AnnealOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::OneToOne {
        return Err(Error::Config("anneal requires the 1to1 mode".into()));
    }
    let grid = spec.source_grid(cfg.source_variance)?;
    let pts = scalar_problem_points(&grid);
    // linear start: the power target, or unit SNR per channel when λ is given directly
    let p = cfg.power_target.unwrap_or(1.0);
    let a = linear_slope(p, cfg.source_variance);
    let seeded: Vec<(Vec<f64>, Vec<f64>)> = seeded
        .iter()
        .map(|m| {
            if !grid.matches(m.grid().points(), 1e-12) {
                return Err(Error::Config("warm-start mapping uses a different source grid".into()));
            }
            Ok((m.g1().to_vec(), m.g2().to_vec()))
        })
        .collect::<Result<_>>()?;
    let d = design(&DesignInputs {
        points: &pts,
        weights: grid.weights(),
        cfg,
        spec,
        schedule,
        seed,
        baseline_model: LocalModel::affine(a, 0.0, a, 0.0),
        baseline_lambda: linear_stationary_lambda(cfg, p),
        seeded: &seeded,
    })?;
    Ok(AnnealOutcome {
        mapping: ScalarMapping::new(grid, d.g1, d.g2)?,
        metrics: d.metrics,
        trace: d.trace,
        origin: d.origin,
        lambda: d.lambda,
        baseline: d.baseline,
        candidates: d.candidates,
    })
}

/// Greedy descent on the sampled mapping with MMSE decoders rebuilt every round.
///
/// Stops when a round improves `J` by less than `tol` (relative), in which
/// case that round is discarded, so a converged mapping is a fixed point.
pub fn greedy_refine(mapping: &ScalarMapping, cfg: &SystemConfig, spec: &GridSpec, tol: f64) -> Result<(ScalarMapping, Metrics)> {
    let r = greedy_refine_detailed(mapping, cfg, spec, tol, AnnealSchedule::default().refine_max_rounds)?;
    Ok((r.mapping, r.metrics))
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub mapping: ScalarMapping,
    pub metrics: Metrics,
    /// Accepted rounds.
    pub rounds: usize,
    /// The last line search found no descent step.
    pub stalled: bool,
}

pub fn greedy_refine_detailed(mapping: &ScalarMapping, cfg: &SystemConfig, spec: &GridSpec, tol: f64, max_rounds: usize) -> Result<RefineOutcome> {
    cfg.validate()?;
    let pts = mapping.points();
    let pb = Problem { points: &pts, weights: mapping.grid().weights(), cfg, spec };
    let rf = refine(&pb, mapping.g1(), mapping.g2(), tol, max_rounds)?;
    Ok(RefineOutcome { mapping: ScalarMapping::new(mapping.grid().clone(), rf.g1, rf.g2)?, metrics: rf.metrics, rounds: rf.rounds, stalled: rf.stalled })
}

/// Analytic `∂J/∂g_i(x_k)` with the decoders held fixed, for every point.
pub fn mapping_gradient(mapping: &ScalarMapping, decoders: &DecoderTable, cfg: &SystemConfig) -> Vec<[f64; 2]> {
    let w = cfg.cost_weights();
    mapping
        .grid()
        .points()
        .iter()
        .zip(mapping.grid().weights())
        .enumerate()
        .map(|(k, (&x, &p))| {
            let u = [mapping.g1()[k], mapping.g2()[k]];
            point_eval(&[x], u, decoders, Order::Gradient).grad(w, u).map(|g| p * g)
        })
        .collect()
}
