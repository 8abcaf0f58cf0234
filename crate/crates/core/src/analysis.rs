//! Photon-number observables, closed-form long-time limits, the effective nonlinear
//! damping rate and the σ(n) stopping-time search.

use serde::Serialize;

use crate::dynamics::{ChannelKind, JumpChannel};
use crate::error::{Error, Result};
use crate::fock::C64;
use crate::integrator::IntegratorConfig;
use crate::pauli::{self, PopulationVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observables {
    pub mean_n: f64,
    pub std_n: f64,
    /// Σ n(n−1) p_n / mean²; zero when the mean vanishes.
    pub g2: f64,
}

pub fn observables(populations: &[f64]) -> Observables {
    let mut mean = 0.0;
    let mut second = 0.0;
    for (n, &p) in populations.iter().enumerate() {
        let n = n as f64;
        mean += n * p;
        second += n * n * p;
    }
    let var = (second - mean * mean).max(0.0);
    let factorial_moment = second - mean;
    let g2 = if mean > 0.0 {
        factorial_moment / (mean * mean)
    } else {
        0.0
    };
    Observables {
        mean_n: mean,
        std_n: var.sqrt(),
        g2,
    }
}

/// Sampled observables of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub mean_n: Vec<f64>,
    pub std_n: Vec<f64>,
    pub g2: Vec<f64>,
    /// |tr ρ(t) − tr ρ(0)|.
    pub trace_err: Vec<f64>,
    /// One row per sample, one column per Fock level.
    pub populations: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn with_capacity(samples: usize) -> Self {
        Self {
            t: Vec::with_capacity(samples),
            mean_n: Vec::with_capacity(samples),
            std_n: Vec::with_capacity(samples),
            g2: Vec::with_capacity(samples),
            trace_err: Vec::with_capacity(samples),
            populations: Vec::with_capacity(samples),
        }
    }

    /// Appends a sample; the trace error is measured against the first sample.
    pub fn push(&mut self, t: f64, populations: Vec<f64>) {
        let total: f64 = populations.iter().sum();
        let initial = self
            .populations
            .first()
            .map(|p| p.iter().sum::<f64>())
            .unwrap_or(total);
        let obs = observables(&populations);
        self.t.push(t);
        self.mean_n.push(obs.mean_n);
        self.std_n.push(obs.std_n);
        self.g2.push(obs.g2);
        self.trace_err.push((total - initial).abs());
        self.populations.push(populations);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.populations.first().map_or(0, Vec::len)
    }

    pub fn last_populations(&self) -> Option<&[f64]> {
        self.populations.last().map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SteadyBasis {
    /// Only the a†aa channel: the vacuum weight is frozen, everything else ends in |1⟩.
    EffectiveOnly,
    /// Only a²: parity is conserved.
    TwoPhotonOnly,
    /// Only a³: photon number mod 3 is conserved.
    ThreePhotonOnly,
    /// Linear loss present: everything ends in the vacuum.
    LinearLoss,
    /// Numerically integrated to `t_final`.
    Numeric { t_final: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyPrediction {
    pub p_inf: Vec<f64>,
    pub basis_of_validity: SteadyBasis,
}

fn active(channels: &[JumpChannel]) -> Vec<ChannelKind> {
    let mut kinds: Vec<ChannelKind> = channels
        .iter()
        .filter(|c| c.rate > 0.0)
        .map(|c| c.kind())
        .collect();
    kinds.sort();
    kinds.dedup();
    kinds
}

/// Long-time populations pinned by a conservation law of the channel set.
pub fn steady_state_prediction(
    p0: &PopulationVector,
    channels: &[JumpChannel],
) -> Result<SteadyPrediction> {
    let p = p0.as_slice();
    let total: f64 = p.iter().sum();
    let mut p_inf = vec![0.0; p.len()];
    let kinds = active(channels);
    let residue_split = |modulus: usize, out: &mut Vec<f64>| {
        for (n, &pn) in p.iter().enumerate() {
            out[n % modulus] += pn;
        }
    };
    let basis = if kinds.contains(&ChannelKind::Linear) {
        p_inf[0] = total;
        SteadyBasis::LinearLoss
    } else {
        match kinds.as_slice() {
            [ChannelKind::Effective] => {
                p_inf[0] = p[0];
                if p.len() > 1 {
                    p_inf[1] = total - p[0];
                }
                SteadyBasis::EffectiveOnly
            }
            [ChannelKind::TwoPhoton] => {
                residue_split(2, &mut p_inf);
                SteadyBasis::TwoPhotonOnly
            }
            [ChannelKind::ThreePhoton] => {
                residue_split(3, &mut p_inf);
                SteadyBasis::ThreePhotonOnly
            }
            _ => {
                let names: Vec<String> = kinds.iter().map(|k| format!("{k:?}")).collect();
                return Err(Error::NoClosedForm(format!("{{{}}}", names.join(", "))));
            }
        }
    };
    Ok(SteadyPrediction {
        p_inf,
        basis_of_validity: basis,
    })
}

/// Closed form when one exists, otherwise populations integrated to
/// `t = 20 / slowest nonzero loss rate`.
pub fn long_time_limit(
    p0: &PopulationVector,
    channels: &[JumpChannel],
    cfg: &IntegratorConfig,
) -> Result<SteadyPrediction> {
    match steady_state_prediction(p0, channels) {
        Err(Error::NoClosedForm(_)) => {}
        other => return other,
    }
    let slowest = pauli::slowest_loss_rate(channels, p0.len() - 1)
        .ok_or_else(|| Error::UnsupportedChannels("no active loss channel".into()))?;
    let t_final = 20.0 / slowest;
    let series = pauli::evolve_populations(p0, channels, &[0.0, t_final], cfg)?;
    Ok(SteadyPrediction {
        p_inf: series.last_populations().unwrap_or_default().to_vec(),
        basis_of_validity: SteadyBasis::Numeric { t_final },
    })
}

/// Γe = Γa |2 U4 / Γb|².
pub fn effective_rate(u4: C64, gamma_b: f64, gamma_a: f64) -> Result<f64> {
    if gamma_b.is_nan() || gamma_b <= 0.0 {
        return Err(Error::NonpositiveGammaB(gamma_b));
    }
    Ok(gamma_a * (u4 * 2.0 / gamma_b).norm_sqr())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaMinimum {
    pub t_star: f64,
    pub sigma_star: f64,
    pub populations: Vec<f64>,
    /// Index of the grid sample nearest the refined minimum.
    pub sample: usize,
}

/// Three-point Lagrange interpolation through (x_i, y_i) evaluated at `x`.
fn lagrange3(x: [f64; 3], y: [f64; 3], at: f64) -> f64 {
    let mut v = 0.0;
    for i in 0..3 {
        let mut w = 1.0;
        for j in 0..3 {
            if i != j {
                w *= (at - x[j]) / (x[i] - x[j]);
            }
        }
        v += w * y[i];
    }
    v
}

/// Local minimum of σ(n) inside `window`, refined by a parabola through the three
/// samples around the grid argmin. Ties go to the earlier sample.
pub fn find_sigma_min(series: &TimeSeries, window: (f64, f64)) -> Result<SigmaMinimum> {
    let (t_lo, t_hi) = window;
    let no_min = || Error::NoInteriorMinimum { t_lo, t_hi };
    let idx: Vec<usize> = (0..series.len())
        .filter(|&i| series.t[i] >= t_lo && series.t[i] <= t_hi)
        .collect();
    if idx.len() < 3 {
        return Err(no_min());
    }
    let mut best = idx[0];
    for &i in &idx {
        if series.std_n[i] < series.std_n[best] {
            best = i;
        }
    }
    if best == idx[0] || best == *idx.last().unwrap() {
        return Err(no_min());
    }
    let (i0, i1, i2) = (best - 1, best, best + 1);
    let ts = [series.t[i0], series.t[i1], series.t[i2]];
    let ss = [series.std_n[i0], series.std_n[i1], series.std_n[i2]];
    // vertex of the interpolating parabola
    let d1 = (ss[1] - ss[0]) / (ts[1] - ts[0]);
    let d2 = (ss[2] - ss[1]) / (ts[2] - ts[1]);
    let curvature = (d2 - d1) / (ts[2] - ts[0]);
    let t_star = if curvature > 0.0 {
        let vertex = 0.5 * (ts[0] + ts[1]) - d1 / (2.0 * curvature);
        vertex.clamp(ts[0], ts[2])
    } else {
        ts[1]
    };
    let sigma_star = lagrange3(ts, ss, t_star).min(ss[1]);
    let populations = (0..series.levels())
        .map(|n| {
            let p = [
                series.populations[i0][n],
                series.populations[i1][n],
                series.populations[i2][n],
            ];
            lagrange3(ts, p, t_star)
        })
        .collect();
    Ok(SigmaMinimum {
        t_star,
        sigma_star,
        populations,
        sample: best,
    })
}
