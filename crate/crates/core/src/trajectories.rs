//! Quantum-jump unraveling of the master equation.
//!
//! All channels are lowering monomials and the Kerr term is number-diagonal, so the
//! non-Hermitian no-jump Hamiltonian H − (i/2) Σ γ L†L is diagonal and the no-jump
//! evolution is exact: ψ_n(s) = ψ_n e^{−(i E_n + R_n/2) s}. Jump times are found by
//! bisection of the squared norm against a uniform draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::TimeSeries;
use crate::dynamics::{require_zero_start, JumpChannel, KerrTerm};
use crate::error::{Error, Result};
use crate::fock::{self, jump_matrix, FockCutoff, PureState, C64};

/// Width of the bracket left by the jump-time bisection.
pub const JUMP_TIME_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub n_traj: usize,
    pub master_seed: u64,
    /// Bracketing increment for the jump-time search.
    pub dt_max: f64,
    pub grid: Vec<f64>,
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
        }
        if !(self.dt_max.is_finite() && self.dt_max > 0.0) {
            return Err(Error::InvalidConfig("dt_max must be positive".into()));
        }
        require_zero_start(&self.grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub t: Vec<f64>,
    /// Ensemble mean of p_n, one row per sample.
    pub mean: Vec<Vec<f64>>,
    /// Standard error of each mean.
    pub stderr: Vec<Vec<f64>>,
    pub n_traj: usize,
    pub total_jumps: u64,
}

impl EnsembleResult {
    pub fn to_time_series(&self) -> TimeSeries {
        let mut s = TimeSeries::with_capacity(self.t.len());
        for (t, p) in self.t.iter().zip(&self.mean) {
            s.push(*t, p.clone());
        }
        s
    }

    /// Fraction of (sample, level) bins where `reference` lies within `sigmas`
    /// standard errors of the ensemble mean. `floor` is added to every error bar so
    /// bins that no trajectory ever visits compare equal to a reference of ~1e-15.
    pub fn agreement_fraction(&self, reference: &TimeSeries, sigmas: f64, floor: f64) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, (mean, err)) in self.mean.iter().zip(&self.stderr).enumerate() {
            let Some(reference) = reference.populations.get(i) else {
                break;
            };
            for ((m, e), r) in mean.iter().zip(err).zip(reference) {
                total += 1;
                if (m - r).abs() <= sigmas * e + floor {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

struct JumpModel {
    energy: Vec<f64>,
    loss: Vec<f64>,
    // per channel: rate and nonzero entries (row, col, value)
    jumps: Vec<(f64, Vec<(usize, usize, C64)>)>,
}

impl JumpModel {
    fn new(channels: &[JumpChannel], kerr: KerrTerm, cutoff: FockCutoff) -> Result<Self> {
        let dim = cutoff.dim();
        let a = fock::annihilation_matrix(cutoff);
        let ad = a.adjoint();
        let h = &ad * &ad * &a * &a * C64::new(kerr.u1, 0.0);
        let mut loss_op = fock::CMatrix::zeros(dim, dim);
        let mut jumps = Vec::new();
        for ch in channels {
            ch.validate()?;
            if ch.rate == 0.0 {
                continue;
            }
            let l = jump_matrix(ch.monomial, cutoff)?;
            loss_op += l.adjoint() * &l * C64::new(ch.rate, 0.0);
            let mut entries = Vec::new();
            for col in 0..dim {
                for row in 0..dim {
                    if l[(row, col)] != C64::new(0.0, 0.0) {
                        entries.push((row, col, l[(row, col)]));
                    }
                }
            }
            jumps.push((ch.rate, entries));
        }
        for k in 0..dim {
            for l in 0..dim {
                if k != l && (h[(k, l)].norm() > 0.0 || loss_op[(k, l)].norm() > 0.0) {
                    return Err(Error::UnsupportedChannels(
                        "no-jump Hamiltonian is not diagonal in the Fock basis".into(),
                    ));
                }
            }
        }
        Ok(Self {
            energy: (0..dim).map(|n| h[(n, n)].re).collect(),
            loss: (0..dim).map(|n| loss_op[(n, n)].re).collect(),
            jumps,
        })
    }

    /// Squared norm after a no-jump interval `s` from a normalized state.
    fn norm_after(&self, weights: &[f64], s: f64) -> f64 {
        weights
            .iter()
            .zip(&self.loss)
            .map(|(w, r)| w * (-r * s).exp())
            .sum()
    }

    fn dark_weight(&self, weights: &[f64]) -> f64 {
        weights
            .iter()
            .zip(&self.loss)
            .filter(|(_, r)| **r == 0.0)
            .map(|(w, _)| w)
            .sum()
    }

    fn populations_after(&self, weights: &[f64], s: f64) -> Vec<f64> {
        let mut p: Vec<f64> = weights
            .iter()
            .zip(&self.loss)
            .map(|(w, r)| w * (-r * s).exp())
            .collect();
        let norm: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= norm);
        p
    }
}

struct Accumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    jumps: u64,
}

impl Accumulator {
    fn merge(mut self, other: Accumulator) -> Accumulator {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.jumps += other.jumps;
        self
    }
}

fn trajectory_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

fn run_one(model: &JumpModel, psi0: &PureState, cfg: &TrajectoryConfig, index: usize) -> Accumulator {
    let grid = &cfg.grid;
    let levels = psi0.dim();
    let mut record = vec![0.0; grid.len() * levels];
    let mut rng = trajectory_rng(cfg.master_seed, index);
    let mut psi: Vec<C64> = psi0.amplitudes().iter().copied().collect();
    let norm = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|c| *c /= norm);
    let mut t = 0.0;
    let mut next = 0;
    let mut jumps = 0u64;
    let t_end = *grid.last().unwrap();

    while next < grid.len() {
        let weights: Vec<f64> = psi.iter().map(|c| c.norm_sqr()).collect();
        // uniform in (0, 1]
        let draw = 1.0 - rng.gen::<f64>();
        let jump_at = if model.dark_weight(&weights) >= draw {
            None
        } else {
            let mut lo = 0.0;
            let mut hi = cfg.dt_max;
            while model.norm_after(&weights, hi) > draw && t + lo <= t_end {
                lo = hi;
                hi += cfg.dt_max;
            }
            if t + lo > t_end {
                None
            } else {
                while hi - lo > JUMP_TIME_TOL {
                    let mid = 0.5 * (lo + hi);
                    if model.norm_after(&weights, mid) > draw {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(0.5 * (lo + hi))
            }
        };
        let horizon = jump_at.map_or(f64::INFINITY, |s| t + s);
        while next < grid.len() && grid[next] < horizon {
            let p = model.populations_after(&weights, grid[next] - t);
            record[next * levels..(next + 1) * levels].copy_from_slice(&p);
            next += 1;
        }
        let Some(s) = jump_at else { break };
        for (n, c) in psi.iter_mut().enumerate() {
            *c *= C64::new(-0.5 * model.loss[n] * s, -model.energy[n] * s).exp();
        }
        // channel choice ∝ γ_c ‖L_c ψ‖²
        let candidates: Vec<(f64, Vec<C64>)> = model
            .jumps
            .iter()
            .map(|(rate, entries)| {
                let mut out = vec![C64::new(0.0, 0.0); levels];
                for &(row, col, v) in entries {
                    out[row] += v * psi[col];
                }
                let w = rate * out.iter().map(|c| c.norm_sqr()).sum::<f64>();
                (w, out)
            })
            .collect();
        let total: f64 = candidates.iter().map(|(w, _)| w).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = candidates.len() - 1;
        for (i, (w, _)) in candidates.iter().enumerate() {
            if pick < *w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        let mut new_psi = candidates.into_iter().nth(chosen).unwrap().1;
        let norm = new_psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        new_psi.iter_mut().for_each(|c| *c /= norm);
        psi = new_psi;
        t += s;
        jumps += 1;
    }
    let sum_sq = record.iter().map(|x| x * x).collect();
    Accumulator {
        sum: record,
        sum_sq,
        jumps,
    }
}

/// Pairwise reduction over trajectory indices `lo..hi`; the tree shape depends only
/// on the range, so results are identical for any thread schedule.
fn reduce(model: &JumpModel, psi0: &PureState, cfg: &TrajectoryConfig, lo: usize, hi: usize) -> Accumulator {
    if hi - lo == 1 {
        return run_one(model, psi0, cfg, lo);
    }
    let mid = lo + (hi - lo) / 2;
    let (left, right) = rayon::join(
        || reduce(model, psi0, cfg, lo, mid),
        || reduce(model, psi0, cfg, mid, hi),
    );
    left.merge(right)
}

pub fn run_ensemble(
    psi0: &PureState,
    channels: &[JumpChannel],
    kerr: KerrTerm,
    cfg: &TrajectoryConfig,
) -> Result<EnsembleResult> {
    cfg.validate()?;
    let cutoff = FockCutoff::new(psi0.dim().saturating_sub(1))?;
    let model = JumpModel::new(channels, kerr, cutoff)?;
    let acc = reduce(&model, psi0, cfg, 0, cfg.n_traj);
    let levels = psi0.dim();
    let n = cfg.n_traj as f64;
    let mut mean = Vec::with_capacity(cfg.grid.len());
    let mut stderr = Vec::with_capacity(cfg.grid.len());
    for i in 0..cfg.grid.len() {
        let range = i * levels..(i + 1) * levels;
        let m: Vec<f64> = acc.sum[range.clone()].iter().map(|s| s / n).collect();
        let e: Vec<f64> = acc.sum_sq[range]
            .iter()
            .zip(&m)
            .map(|(sq, mu)| {
                if cfg.n_traj < 2 {
                    0.0
                } else {
                    let var = ((sq - n * mu * mu) / (n - 1.0)).max(0.0);
                    (var / n).sqrt()
                }
            })
            .collect();
        mean.push(m);
        stderr.push(e);
    }
    Ok(EnsembleResult {
        t: cfg.grid.clone(),
        mean,
        stderr,
        n_traj: cfg.n_traj,
        total_jumps: acc.jumps,
    })
}
