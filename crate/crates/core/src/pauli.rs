//! Population (Pauli) equations and single-stripe evolution for the a†aa channel.
//!
//! Every lowering monomial moves |n⟩ to |n − δ⟩ with probability rate
//! γ |⟨n−δ|(a†)^j a^k|n⟩|², so the diagonal of ρ obeys a closed cascade
//!
//!   dp_n/dt = Σ_c [ r_c(n+δ_c) p_{n+δ_c} − r_c(n) p_n ].
//!
//! For the a†aa channel alone each off-diagonal stripe ρ_{k,k+d} is closed too:
//!
//!   dρ_kl/dt = −(Γ/2)[k(k−1)² + l(l−1)²] ρ_kl + Γ √(k²(k+1) l²(l+1)) ρ_{k+1,l+1}.

use serde::Serialize;

use crate::analysis::TimeSeries;
use crate::dynamics::{require_zero_start, residue_period, ChannelKind, JumpChannel};
use crate::error::{Error, Result};
use crate::fock::C64;
use crate::integrator::{integrate, residue_drift, IntegratorConfig, SplitSystem, StepStats};

const NEGATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationVector {
    p: Vec<f64>,
}

impl PopulationVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidState("need at least two Fock levels".into()));
        }
        if p.iter().any(|&x| !x.is_finite() || x < -NEGATIVE_TOL) {
            return Err(Error::InvalidState("populations must be nonnegative".into()));
        }
        let total: f64 = p.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidState(format!("populations sum to {total} > 1")));
        }
        Ok(Self { p })
    }

    pub fn fock(n: usize, nmax: usize) -> Result<Self> {
        if n > nmax {
            return Err(Error::InvalidState(format!("level {n} above cutoff {nmax}")));
        }
        let mut p = vec![0.0; nmax + 1];
        p[n] = 1.0;
        Self::new(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn nmax(&self) -> usize {
        self.p.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationRate {
    /// Total rate out of level n.
    pub loss_rate: f64,
    /// Level n + δ that feeds n.
    pub source_level: usize,
    /// Rate of the feeding transition n + δ → n (the loss rate of the source level).
    pub gain_coefficient: f64,
}

fn transition_rate(channel: &JumpChannel, n: usize) -> f64 {
    channel.rate * channel.monomial.amplitude_sq(n)
}

pub fn population_rates(channel: &JumpChannel, n: usize) -> PopulationRate {
    let shift = channel.monomial.lowering().max(0) as usize;
    let source = n + shift;
    PopulationRate {
        loss_rate: transition_rate(channel, n),
        source_level: source,
        gain_coefficient: transition_rate(channel, source),
    }
}

/// Smallest nonzero total loss rate over levels 0..=nmax.
pub fn slowest_loss_rate(channels: &[JumpChannel], nmax: usize) -> Option<f64> {
    (0..=nmax)
        .map(|n| channels.iter().map(|c| transition_rate(c, n)).sum::<f64>())
        .filter(|&r| r > 0.0)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
}

struct Cascade {
    decay: Vec<C64>,
    // (destination, source, rate)
    transfers: Vec<(usize, usize, f64)>,
    period: usize,
}

impl Cascade {
    fn new(channels: &[JumpChannel], nmax: usize) -> Result<Self> {
        let mut decay = vec![C64::new(0.0, 0.0); nmax + 1];
        let mut transfers = Vec::new();
        for ch in channels {
            ch.validate()?;
            let shift = ch.monomial.lowering() as usize;
            for (n, d) in decay.iter_mut().enumerate() {
                let r = transition_rate(ch, n);
                if r > 0.0 {
                    *d -= r;
                    transfers.push((n - shift, n, r));
                }
            }
        }
        Ok(Self {
            decay,
            transfers,
            period: residue_period(channels),
        })
    }
}

impl SplitSystem for Cascade {
    fn len(&self) -> usize {
        self.decay.len()
    }

    fn decay(&self) -> &[C64] {
        &self.decay
    }

    fn invariant_drift(&self, before: &[C64], after: &[C64]) -> f64 {
        residue_drift(before, after, self.decay.len(), self.period, |n| n)
    }

    fn coupling(&self, y: &[C64], out: &mut [C64]) {
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        for &(dst, src, r) in &self.transfers {
            out[dst] += y[src] * r;
        }
    }
}

pub fn evolve_populations(
    p0: &PopulationVector,
    channels: &[JumpChannel],
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<TimeSeries> {
    evolve_populations_with_stats(p0, channels, grid, cfg).map(|(s, _)| s)
}

pub fn evolve_populations_with_stats(
    p0: &PopulationVector,
    channels: &[JumpChannel],
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(TimeSeries, StepStats)> {
    require_zero_start(grid)?;
    let sys = Cascade::new(channels, p0.nmax())?;
    let y0: Vec<C64> = p0.as_slice().iter().map(|&p| C64::new(p, 0.0)).collect();
    let mut series = TimeSeries::with_capacity(grid.len());
    let stats = integrate(&sys, &y0, grid, cfg, |_, t, y| {
        series.push(t, y.iter().map(|c| c.re).collect());
        Ok(())
    })?;
    Ok((series, stats))
}

/// Elements ρ_{k,k+d}, k = 0..=nmax−d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StripeVector {
    pub offset: usize,
    pub values: Vec<C64>,
}

impl StripeVector {
    pub fn new(offset: usize, values: Vec<C64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidState("empty stripe".into()));
        }
        Ok(Self { offset, values })
    }

    /// Stripe `offset` of a square matrix.
    pub fn from_matrix(m: &crate::fock::CMatrix, offset: usize) -> Result<Self> {
        let dim = m.nrows();
        if offset >= dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: offset,
            });
        }
        Self::new(offset, (0..dim - offset).map(|k| m[(k, k + offset)]).collect())
    }

    pub fn nmax(&self) -> usize {
        self.values.len() - 1 + self.offset
    }
}

/// Decay rate and feed coefficient of element ρ_kl under the a†aa channel.
pub fn stripe_rates(k: usize, l: usize, gamma_e: f64) -> (f64, f64) {
    let cube = |n: usize| {
        let n = n as f64;
        n * (n - 1.0) * (n - 1.0)
    };
    let (kf, lf) = (k as f64, l as f64);
    let decay = 0.5 * gamma_e * (cube(k) + cube(l));
    let feed = gamma_e * (kf * kf * (kf + 1.0) * lf * lf * (lf + 1.0)).sqrt();
    (decay, feed)
}

struct Stripe {
    decay: Vec<C64>,
    feed: Vec<f64>,
}

impl SplitSystem for Stripe {
    fn len(&self) -> usize {
        self.decay.len()
    }

    fn decay(&self) -> &[C64] {
        &self.decay
    }

    fn coupling(&self, y: &[C64], out: &mut [C64]) {
        let n = y.len();
        for k in 0..n {
            out[k] = if k + 1 < n {
                y[k + 1] * self.feed[k]
            } else {
                C64::new(0.0, 0.0)
            };
        }
    }
}

/// Evolves one stripe under the pure a†aa channel. Any other active channel is rejected.
pub fn evolve_stripe(
    s0: &StripeVector,
    channels: &[JumpChannel],
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<StripeVector>> {
    require_zero_start(grid)?;
    let mut gamma_e = 0.0;
    for ch in channels.iter().filter(|c| c.rate > 0.0) {
        ch.validate()?;
        if ch.kind() != ChannelKind::Effective {
            return Err(Error::UnsupportedChannels(format!(
                "stripe evolution handles only a†aa, got {:?}",
                ch.kind()
            )));
        }
        gamma_e += ch.rate;
    }
    let d = s0.offset;
    let len = s0.values.len();
    let mut decay = Vec::with_capacity(len);
    let mut feed = Vec::with_capacity(len);
    for k in 0..len {
        let (loss, gain) = stripe_rates(k, k + d, gamma_e);
        decay.push(C64::new(-loss, 0.0));
        feed.push(gain);
    }
    let sys = Stripe { decay, feed };
    let mut out = Vec::with_capacity(grid.len());
    integrate(&sys, &s0.values, grid, cfg, |_, _, y| {
        out.push(StripeVector {
            offset: d,
            values: y.to_vec(),
        });
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::uniform_grid;

    fn poisson(mean: f64, nmax: usize) -> Vec<f64> {
        let mut p = vec![(-mean).exp()];
        for n in 1..=nmax {
            let prev = p[n - 1];
            p.push(prev * mean / n as f64);
        }
        p
    }

    #[test]
    fn rate_examples() {
        let e = JumpChannel::effective(1.0);
        assert_eq!(population_rates(&e, 3).loss_rate, 12.0);
        assert_eq!(population_rates(&e, 1).loss_rate, 0.0);
        let r = population_rates(&e, 1);
        assert_eq!(r.source_level, 2);
        assert!((r.gain_coefficient - 2.0).abs() < 1e-14);
        assert!((population_rates(&JumpChannel::three_photon(1.0), 5).loss_rate - 60.0).abs() < 1e-12);
        assert_eq!(population_rates(&JumpChannel::two_photon(1.0), 1).loss_rate, 0.0);
    }

    #[test]
    fn two_level_cascade_closed_form() {
        let p0 = PopulationVector::fock(2, 6).unwrap();
        let grid = uniform_grid(3.0, 13);
        let s = evolve_populations(&p0, &[JumpChannel::effective(1.0)], &grid, &IntegratorConfig::default())
            .unwrap();
        for (t, p) in s.t.iter().zip(&s.populations) {
            assert!((p[2] - (-2.0 * t).exp()).abs() < 1e-9);
            assert!((p[1] - (1.0 - (-2.0 * t).exp())).abs() < 1e-9);
        }
    }

    #[test]
    fn three_photon_jump_empties_level_three() {
        let p0 = PopulationVector::fock(3, 5).unwrap();
        let s = evolve_populations(&p0, &[JumpChannel::three_photon(1.0)], &[0.0, 20.0], &IntegratorConfig::default())
            .unwrap();
        assert!((s.populations[1][0] - 1.0).abs() < 1e-10, "{:?}", s.populations[1]);
    }

    #[test]
    fn stripe_coefficients() {
        let (decay, feed) = stripe_rates(2, 1, 1.0);
        assert_eq!(decay, 1.0);
        assert!((feed - 24f64.sqrt()).abs() < 1e-14);
        let (decay, feed) = stripe_rates(1, 0, 1.0);
        assert_eq!(decay, 0.0);
        // l = 0 kills the feed from ρ_{2,1}: a†aa|1⟩ = 0
        assert_eq!(feed, 0.0);
    }

    #[test]
    fn diagonal_stripe_matches_populations() {
        let p = poisson(9.0, 40);
        let stripe = StripeVector::new(0, p.iter().map(|&x| C64::new(x, 0.0)).collect()).unwrap();
        let grid = uniform_grid(10.0, 11);
        let e = [JumpChannel::effective(1.0)];
        let cfg = IntegratorConfig::default().tightened(100.0);
        let stripes = evolve_stripe(&stripe, &e, &grid, &cfg).unwrap();
        let pops = evolve_populations(&PopulationVector::new(p).unwrap(), &e, &grid, &cfg).unwrap();
        for (s, p) in stripes.iter().zip(&pops.populations) {
            for (a, b) in s.values.iter().zip(p) {
                assert!((a.re - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stripe_rejects_other_channels() {
        let s = StripeVector::new(1, vec![C64::new(0.1, 0.0); 4]).unwrap();
        let err = evolve_stripe(
            &s,
            &[JumpChannel::effective(1.0), JumpChannel::linear(0.1)],
            &[0.0, 1.0],
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedChannels(_)));
    }

    #[test]
    fn population_vector_validation() {
        assert!(PopulationVector::new(vec![0.5, 0.6]).is_err());
        assert!(PopulationVector::new(vec![-0.1, 0.6]).is_err());
        assert!(PopulationVector::new(vec![1.0]).is_err());
        assert!(PopulationVector::new(vec![0.3, 0.7 - 1e-13]).is_ok());
    }

    #[test]
    fn slowest_rates() {
        assert_eq!(slowest_loss_rate(&[JumpChannel::effective(1.0)], 10), Some(2.0));
        assert_eq!(slowest_loss_rate(&[JumpChannel::two_photon(0.5)], 10), Some(1.0));
        assert_eq!(slowest_loss_rate(&[], 10), None);
    }
}
