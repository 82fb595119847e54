//! MMSE side and central decoders for a (possibly randomized) encoder.
//!
//! A decoder table is built from a set of *atoms*: source values `x` with
//! probability mass `weight` that the encoder sends to channel inputs
//! `(u1, u2)`. A deterministic encoder contributes one atom per source grid
//! point; a randomized encoder contributes one atom per (point, local model)
//! pair weighted by the association probability. Every table entry is the
//! posterior mean of `x` at that channel-output node, accumulated in the log
//! domain with per-node max subtraction.

use crate::annealer::{Association, LocalModelSet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{ChannelGrid, SourceGrid};
use crate::system::{ScalarMapping, SystemConfig};

/// Node-wise log-likelihood cutoff below which terms are treated as zero in
/// exact mode (`exp(-745)` is the smallest subnormal double).
const LN_EXACT_CUT: f64 = -745.0;
/// Scaled central denominators below this are recomputed node by node.
const TINY_DENOMINATOR: f64 = 1e-280;

/// One unit of probability mass routed through the channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Atom<const D: usize> {
    pub weight: f64,
    pub x: [f64; D],
    pub u: [f64; 2],
}

/// MMSE decoder tables on a pair of channel-output grids.
///
/// `D` is the number of source components reconstructed per channel use
/// (1 for the 1:1 system, 2 for the 2:1 system).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoders<const D: usize> {
    pub(crate) grids: [ChannelGrid; 2],
    pub(crate) noise_variance: [f64; 2],
    pub(crate) side: [Vec<[f64; D]>; 2],
    /// Row-major over `grids[0] × grids[1]`.
    pub(crate) central: Vec<[f64; D]>,
    pub(crate) fallbacks: usize,
}

/// Decoder tables of the scalar (1:1) system.
pub type DecoderTable = Decoders<1>;

impl<const D: usize> Decoders<D> {
    pub fn grid(&self, channel: usize) -> &ChannelGrid {
        &self.grids[channel]
    }

    pub fn noise_variance(&self, channel: usize) -> f64 {
        self.noise_variance[channel]
    }

    /// Side-decoder estimate of channel `channel` (0 or 1) at node `j`.
    pub fn side(&self, channel: usize, j: usize) -> [f64; D] {
        self.side[channel][j]
    }

    /// Central estimate at node `(j1, j2)`.
    pub fn central(&self, j1: usize, j2: usize) -> [f64; D] {
        self.central[j1 * self.grids[1].len() + j2]
    }

    pub fn side_table(&self, channel: usize) -> &[[f64; D]] {
        &self.side[channel]
    }

    pub fn central_table(&self) -> &[[f64; D]] {
        &self.central
    }

    pub fn side_table_mut(&mut self, channel: usize) -> &mut [[f64; D]] {
        &mut self.side[channel]
    }

    pub fn central_table_mut(&mut self) -> &mut [[f64; D]] {
        &mut self.central
    }

    /// Nodes where no atom had a finite likelihood and the prior mean was used.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// Inclusive interval of channel inputs the grid covers with a `4σ_N` margin.
    pub fn coverage(&self, channel: usize) -> (f64, f64) {
        let margin = 4.0 * self.noise_variance[channel].sqrt();
        let g = &self.grids[channel];
        (g.min() + margin, g.max() - margin)
    }

    pub fn covers(&self, u: [f64; 2]) -> bool {
        (0..2).all(|i| {
            let (lo, hi) = self.coverage(i);
            u[i] >= lo && u[i] <= hi
        })
    }

    /// Every entry lies in `[lo, hi]` componentwise and is finite.
    pub fn entries_within(&self, lo: f64, hi: f64) -> bool {
        let ok = |v: &[f64; D]| v.iter().all(|c| c.is_finite() && *c >= lo && *c <= hi);
        self.side.iter().all(|t| t.iter().all(ok)) && self.central.iter().all(ok)
    }
}

impl Decoders<1> {
    pub fn w1(&self) -> Vec<f64> {
        self.side[0].iter().map(|v| v[0]).collect()
    }

    pub fn w2(&self) -> Vec<f64> {
        self.side[1].iter().map(|v| v[0]).collect()
    }

    /// Row-major central table.
    pub fn w0(&self) -> Vec<f64> {
        self.central.iter().map(|v| v[0]).collect()
    }
}

pub(crate) fn check_grids(grids: &[ChannelGrid; 2], noise_variance: [f64; 2]) -> Result<()> {
    for i in 0..2 {
        if grids[i].len() < 2 {
            return Err(Error::Config("channel grid needs >= 2 points".into()));
        }
        if !(noise_variance[i] > 0.0) {
            return Err(Error::Config(format!("noise variance {} must be positive", i + 1)));
        }
    }
    Ok(())
}

/// Builds posterior-mean tables for a set of atoms.
///
/// `prune = 0` is exact. A positive `prune` drops atoms lighter than
/// `prune × max weight` and skips scaled likelihood factors below `prune`;
/// the induced relative error at a node is bounded by
/// `n_atoms · prune / scaled_denominator`, so only nodes far from every atom
/// (which carry negligible probability) are affected. Central nodes whose
/// scaled denominator underflows are set to the prior mean instead of being
/// recomputed exactly; they lie outside the kernel window of every retained
/// atom, so the cost kernels never read them.
pub(crate) fn build_decoders<const D: usize>(
    atoms: &[Atom<D>],
    grids: [ChannelGrid; 2],
    noise_variance: [f64; 2],
    prune: f64,
    exec: Exec,
) -> Decoders<D> {
    let max_w = atoms.iter().map(|a| a.weight).fold(0.0, f64::max);
    let keep = if prune > 0.0 { max_w * prune } else { 0.0 };
    let atoms: Vec<Atom<D>> = atoms
        .iter()
        .copied()
        .filter(|a| a.weight > keep && a.weight.is_finite() && a.u.iter().all(|u| u.is_finite()))
        .collect();
    let ln_cut = if prune > 0.0 { prune.ln().max(LN_EXACT_CUT) } else { LN_EXACT_CUT };
    let ln_w: Vec<f64> = atoms.iter().map(|a| a.weight.ln()).collect();

    let mut fallbacks = 0usize;
    let side: [Vec<[f64; D]>; 2] = [0, 1].map(|i| {
        let inv2v = 0.5 / noise_variance[i];
        let grid = &grids[i];
        let out: Vec<([f64; D], bool)> = exec.map(grid.len(), |j| {
            let y = grid.points()[j];
            let ll: Vec<f64> = atoms
                .iter()
                .zip(&ln_w)
                .map(|(a, lw)| {
                    let d = y - a.u[i];
                    lw - d * d * inv2v
                })
                .collect();
            posterior_mean(&atoms, &ll, ln_cut)
        });
        fallbacks += out.iter().filter(|(_, fb)| *fb).count();
        out.into_iter().map(|(v, _)| v).collect()
    });

    let (central, fb) = central_table(&atoms, &ln_w, &grids, noise_variance, ln_cut, exec);
    fallbacks += fb;
    Decoders { grids, noise_variance, side, central, fallbacks }
}

/// `Σ e^{l_a} x_a / Σ e^{l_a}` with max subtraction; flags a fallback when no
/// term is finite.
fn posterior_mean<const D: usize>(atoms: &[Atom<D>], ll: &[f64], ln_cut: f64) -> ([f64; D], bool) {
    let m = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return ([0.0; D], true);
    }
    let mut den = 0.0;
    let mut num = [0.0; D];
    for (a, &l) in atoms.iter().zip(ll) {
        let s = l - m;
        if s > ln_cut {
            let e = s.exp();
            den += e;
            for d in 0..D {
                num[d] += e * a.x[d];
            }
        }
    }
    if !(den > 0.0) || !den.is_finite() {
        return ([0.0; D], true);
    }
    (num.map(|v| v / den), false)
}

fn central_table<const D: usize>(
    atoms: &[Atom<D>],
    ln_w: &[f64],
    grids: &[ChannelGrid; 2],
    noise_variance: [f64; 2],
    ln_cut: f64,
    exec: Exec,
) -> (Vec<[f64; D]>, usize) {
    let pruned = ln_cut > LN_EXACT_CUT;
    let (y1, y2) = (grids[0].points(), grids[1].points());
    let (n1, n2) = (y1.len(), y2.len());
    let inv1 = 0.5 / noise_variance[0];
    let inv2 = 0.5 / noise_variance[1];
    if atoms.is_empty() {
        return (vec![[0.0; D]; n1 * n2], n1 * n2);
    }
    let ll1 = |j1: usize, a: usize| {
        let d = y1[j1] - atoms[a].u[0];
        ln_w[a] - d * d * inv1
    };
    let ll2 = |j2: usize, a: usize| {
        let d = y2[j2] - atoms[a].u[1];
        -d * d * inv2
    };
    // row and column maxima used to scale the factors
    let s1: Vec<f64> = exec.map(n1, |j1| (0..atoms.len()).map(|a| ll1(j1, a)).fold(f64::NEG_INFINITY, f64::max));
    let s2: Vec<f64> = exec.map(n2, |j2| (0..atoms.len()).map(|a| ll2(j2, a)).fold(f64::NEG_INFINITY, f64::max));

    // column factors, stored per atom over the index span where they are non-negligible
    let cols: Vec<(usize, Vec<f64>)> = exec.map(atoms.len(), |a| {
        let mut lo = n2;
        let mut hi = 0;
        for j2 in 0..n2 {
            if ll2(j2, a) - s2[j2] > ln_cut {
                lo = lo.min(j2);
                hi = j2 + 1;
            }
        }
        if lo >= hi {
            return (0, Vec::new());
        }
        let vals = (lo..hi)
            .map(|j2| {
                let s = ll2(j2, a) - s2[j2];
                if s > ln_cut {
                    s.exp()
                } else {
                    0.0
                }
            })
            .collect();
        (lo, vals)
    });

    let rows: Vec<(Vec<[f64; D]>, usize)> = exec.map(n1, |j1| {
        let mut den = vec![0.0; n2];
        let mut num = vec![[0.0; D]; n2];
        for (a, atom) in atoms.iter().enumerate() {
            let s = ll1(j1, a) - s1[j1];
            if s <= ln_cut {
                continue;
            }
            let c = s.exp();
            let (lo, vals) = &cols[a];
            let cx = atom.x.map(|x| c * x);
            let den_r = &mut den[*lo..*lo + vals.len()];
            let num_r = &mut num[*lo..*lo + vals.len()];
            for ((dn, nm), &e) in den_r.iter_mut().zip(num_r.iter_mut()).zip(vals) {
                *dn += c * e;
                for d in 0..D {
                    nm[d] += cx[d] * e;
                }
            }
        }
        let mut fb = 0;
        let row = (0..n2)
            .map(|j2| {
                if den[j2] > TINY_DENOMINATOR {
                    num[j2].map(|v| v / den[j2])
                } else if pruned {
                    // far from every retained atom: no kernel window reaches this node
                    [0.0; D]
                } else {
                    // exact node-wise log-sum-exp
                    let ll: Vec<f64> = (0..atoms.len()).map(|a| ll1(j1, a) + ll2(j2, a)).collect();
                    let (v, f) = posterior_mean(atoms, &ll, LN_EXACT_CUT);
                    fb += f as usize;
                    v
                }
            })
            .collect();
        (row, fb)
    });
    let mut fallbacks = 0;
    let mut table = Vec::with_capacity(n1 * n2);
    for (row, fb) in rows {
        table.extend(row);
        fallbacks += fb;
    }
    (table, fallbacks)
}

/// Exact MMSE decoders for a deterministic 1:1 encoder.
pub fn optimal_decoders(mapping: &ScalarMapping, grid1: ChannelGrid, grid2: ChannelGrid, cfg: &SystemConfig) -> Result<DecoderTable> {
    optimal_decoders_with(mapping, grid1, grid2, cfg, Exec::default())
}

pub fn optimal_decoders_with(mapping: &ScalarMapping, grid1: ChannelGrid, grid2: ChannelGrid, cfg: &SystemConfig, exec: Exec) -> Result<DecoderTable> {
    cfg.validate()?;
    let grids = [grid1, grid2];
    check_grids(&grids, cfg.noise_variances())?;
    Ok(build_decoders(&mapping_atoms(mapping), grids, cfg.noise_variances(), 0.0, exec))
}

/// Exact MMSE decoders for the randomized encoder that sends `x_k` through
/// local model `m` with probability `q(m|k)`.
pub fn randomized_decoders(
    models: &LocalModelSet<1>,
    assoc: &Association,
    grid: &SourceGrid,
    grid1: ChannelGrid,
    grid2: ChannelGrid,
    cfg: &SystemConfig,
) -> Result<DecoderTable> {
    cfg.validate()?;
    if assoc.n_points() != grid.len() || assoc.n_models() != models.len() {
        return Err(Error::Contract("association shape does not match models and grid".into()));
    }
    let grids = [grid1, grid2];
    check_grids(&grids, cfg.noise_variances())?;
    let mut atoms = Vec::with_capacity(grid.len() * models.len());
    for (k, (&x, &p)) in grid.points().iter().zip(grid.weights()).enumerate() {
        for (m, model) in models.models.iter().enumerate() {
            atoms.push(Atom { weight: p * assoc.get(k, m), x: [x], u: model.apply(&[x]) });
        }
    }
    Ok(build_decoders(&atoms, grids, cfg.noise_variances(), 0.0, Exec::default()))
}

/// Posterior weights over atoms at a side-decoder node, computed from the
/// unnormalized accumulators.
fn side_posterior_atoms<const D: usize>(atoms: &[Atom<D>], channel: usize, y: f64, noise_variance: f64) -> Vec<f64> {
    let ll: Vec<f64> = atoms
        .iter()
        .map(|a| {
            let d = y - a.u[channel];
            a.weight.ln() - 0.5 * d * d / noise_variance
        })
        .collect();
    normalize_log(&ll)
}

fn central_posterior_atoms<const D: usize>(atoms: &[Atom<D>], y: [f64; 2], noise_variance: [f64; 2]) -> Vec<f64> {
    let ll: Vec<f64> = atoms
        .iter()
        .map(|a| {
            let d1 = y[0] - a.u[0];
            let d2 = y[1] - a.u[1];
            a.weight.ln() - 0.5 * d1 * d1 / noise_variance[0] - 0.5 * d2 * d2 / noise_variance[1]
        })
        .collect();
    normalize_log(&ll)
}

fn mapping_atoms(mapping: &ScalarMapping) -> Vec<Atom<1>> {
    (0..mapping.grid().len())
        .map(|k| Atom { weight: mapping.grid().weights()[k], x: [mapping.grid().points()[k]], u: [mapping.g1()[k], mapping.g2()[k]] })
        .collect()
}

/// `P(x_k | y_i)` over the source grid for side decoder `channel` (0 or 1).
pub fn side_posterior(mapping: &ScalarMapping, channel: usize, y: f64, cfg: &SystemConfig) -> Vec<f64> {
    side_posterior_atoms(&mapping_atoms(mapping), channel, y, cfg.noise_variances()[channel])
}

/// `P(x_k | y_1, y_2)` over the source grid.
pub fn central_posterior(mapping: &ScalarMapping, y: [f64; 2], cfg: &SystemConfig) -> Vec<f64> {
    central_posterior_atoms(&mapping_atoms(mapping), y, cfg.noise_variances())
}

fn normalize_log(ll: &[f64]) -> Vec<f64> {
    let m = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ll.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
