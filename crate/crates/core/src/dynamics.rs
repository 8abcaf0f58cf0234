//! Master equation with lowering-monomial jump operators:
//!
//! dρ/dt = −i[H, ρ] + Σ_c γ_c (L_c ρ L_c† − ½{L_c†L_c, ρ}),   H = U1 a†a†aa.

use serde::{Deserialize, Serialize};

use crate::analysis::TimeSeries;
use crate::error::{Error, Result};
use crate::fock::{
    self, hermiticity_error, jump_matrix, CMatrix, DensityMatrix, FockCutoff, Monomial, C64,
};
use crate::integrator::{self, residue_drift, IntegratorConfig, SplitSystem, StepStats};

pub const TRACE_DRIFT_LIMIT: f64 = 1e-8;
pub const POSITIVITY_LIMIT: f64 = -1e-8;

/// The four absorption processes of the attenuator model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// a†aa
    Effective,
    /// a
    Linear,
    /// a²
    TwoPhoton,
    /// a³
    ThreePhoton,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpChannel {
    pub monomial: Monomial,
    pub rate: f64,
}

impl JumpChannel {
    pub fn new(creation: u32, annihilation: u32, rate: f64) -> Result<Self> {
        let ch = Self {
            monomial: Monomial::new(creation, annihilation),
            rate,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub const fn effective(rate: f64) -> Self {
        Self {
            monomial: Monomial::new(1, 2),
            rate,
        }
    }

    pub const fn linear(rate: f64) -> Self {
        Self {
            monomial: Monomial::new(0, 1),
            rate,
        }
    }

    pub const fn two_photon(rate: f64) -> Self {
        Self {
            monomial: Monomial::new(0, 2),
            rate,
        }
    }

    pub const fn three_photon(rate: f64) -> Self {
        Self {
            monomial: Monomial::new(0, 3),
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(Error::InvalidChannel(format!("rate {} is negative", self.rate)));
        }
        if self.monomial.lowering() < 1 {
            return Err(Error::InvalidChannel(format!(
                "a†^{} a^{} does not lower the photon number",
                self.monomial.creation, self.monomial.annihilation
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ChannelKind {
        match (self.monomial.creation, self.monomial.annihilation) {
            (1, 2) => ChannelKind::Effective,
            (0, 1) => ChannelKind::Linear,
            (0, 2) => ChannelKind::TwoPhoton,
            (0, 3) => ChannelKind::ThreePhoton,
            _ => ChannelKind::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KerrTerm {
    pub u1: f64,
}

fn channel_operators(
    channels: &[JumpChannel],
    cutoff: FockCutoff,
) -> Result<Vec<(f64, CMatrix)>> {
    let mut ops = Vec::new();
    for ch in channels {
        ch.validate()?;
        if ch.rate > 0.0 {
            ops.push((ch.rate, jump_matrix(ch.monomial, cutoff)?));
        }
    }
    Ok(ops)
}

/// Greatest common divisor of the photon numbers removed by the active channels.
/// Every residue class of n modulo it keeps its total population.
pub(crate) fn residue_period(channels: &[JumpChannel]) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    channels
        .iter()
        .filter(|c| c.rate > 0.0)
        .map(|c| c.monomial.lowering().max(0) as usize)
        .fold(0, gcd)
        .max(1)
}

fn kerr_hamiltonian(kerr: KerrTerm, cutoff: FockCutoff) -> CMatrix {
    let a = fock::annihilation_matrix(cutoff);
    let ad = a.adjoint();
    &ad * &ad * &a * &a * C64::new(kerr.u1, 0.0)
}

/// dρ/dt evaluated with dense matrix products.
pub fn lindblad_rhs(rho: &CMatrix, channels: &[JumpChannel], kerr: KerrTerm) -> Result<CMatrix> {
    let dim = rho.nrows();
    if !rho.is_square() || dim < 2 {
        return Err(Error::DimensionMismatch {
            expected: rho.nrows(),
            found: rho.ncols(),
        });
    }
    let cutoff = FockCutoff::new(dim - 1)?;
    let h = kerr_hamiltonian(kerr, cutoff);
    let i = C64::new(0.0, 1.0);
    let mut out = (&h * rho - rho * &h) * (-i);
    for (rate, l) in channel_operators(channels, cutoff)? {
        let ld = l.adjoint();
        let ldl = &ld * &l;
        out += (&l * rho * &ld - (&ldl * rho + rho * &ldl) * C64::new(0.5, 0.0))
            * C64::new(rate, 0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct SparseOp {
    entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    pub(crate) fn from_dense(m: &CMatrix) -> Self {
        let mut entries = Vec::new();
        for col in 0..m.ncols() {
            for row in 0..m.nrows() {
                let v = m[(row, col)];
                if v != C64::new(0.0, 0.0) {
                    entries.push((row, col, v));
                }
            }
        }
        Self { entries }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Generic Lindblad generator on a flattened (column-major) density matrix, split
/// into the diagonal of the non-Hermitian effective Hamiltonian and the rest.
#[derive(Debug, Clone)]
pub(crate) struct LindbladGenerator {
    dim: usize,
    decay: Vec<C64>,
    off_diagonal: SparseOp,
    jumps: Vec<(f64, SparseOp)>,
    /// Diagonal generator evaluated inside the Runge–Kutta stages instead of
    /// exponentially; empty unless `explicit` was called.
    explicit_diagonal: Vec<C64>,
    /// Populations summed over each residue class of n modulo this are conserved.
    residue_period: usize,
}

impl LindbladGenerator {
    pub(crate) fn new(hamiltonian: &CMatrix, jumps: &[(f64, CMatrix)]) -> Result<Self> {
        let dim = hamiltonian.nrows();
        let half_i = C64::new(0.0, 0.5);
        let mut h_eff = hamiltonian.clone();
        for (rate, l) in jumps {
            if l.nrows() != dim || l.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: l.nrows(),
                });
            }
            h_eff -= l.adjoint() * l * (half_i * *rate);
        }
        let diag: Vec<C64> = (0..dim).map(|k| h_eff[(k, k)]).collect();
        let mut off = h_eff;
        for k in 0..dim {
            off[(k, k)] = C64::new(0.0, 0.0);
        }
        let i = C64::new(0.0, 1.0);
        let mut decay = vec![C64::new(0.0, 0.0); dim * dim];
        for l in 0..dim {
            for k in 0..dim {
                decay[k + l * dim] = -i * (diag[k] - diag[l].conj());
            }
        }
        Ok(Self {
            dim,
            decay,
            off_diagonal: SparseOp::from_dense(&off),
            jumps: jumps
                .iter()
                .map(|(r, m)| (*r, SparseOp::from_dense(m)))
                .collect(),
            explicit_diagonal: Vec::new(),
            residue_period: 1,
        })
    }

    /// Moves the diagonal into the explicit part. Plain Runge–Kutta conserves the
    /// trace to rounding, which the exponential treatment does not once strongly
    /// damped components stay populated (as mode B does under continuous driving).
    pub(crate) fn explicit(mut self) -> Self {
        let zero = vec![C64::new(0.0, 0.0); self.decay.len()];
        self.explicit_diagonal = std::mem::replace(&mut self.decay, zero);
        self
    }

    /// Declares the residue-class population sums modulo `period` as invariants.
    /// Only valid when the Hamiltonian is diagonal in n.
    pub(crate) fn with_residue_period(mut self, period: usize) -> Self {
        self.residue_period = period.max(1);
        self
    }

    pub(crate) fn dim(&self) -> usize {
        self.dim
    }

    /// Full right-hand side, decay plus coupling.
    pub(crate) fn apply(&self, y: &[C64], out: &mut [C64]) {
        self.coupling(y, out);
        for ((o, &yi), &l) in out.iter_mut().zip(y).zip(&self.decay) {
            *o += l * yi;
        }
    }
}

impl SplitSystem for LindbladGenerator {
    fn len(&self) -> usize {
        self.dim * self.dim
    }

    fn decay(&self) -> &[C64] {
        &self.decay
    }

    fn invariant_drift(&self, before: &[C64], after: &[C64]) -> f64 {
        let d = self.dim;
        residue_drift(before, after, d, self.residue_period, |k| k * (d + 1))
    }

    fn coupling(&self, rho: &[C64], out: &mut [C64]) {
        let d = self.dim;
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        for ((o, &yi), &l) in out.iter_mut().zip(rho).zip(&self.explicit_diagonal) {
            *o = l * yi;
        }
        let minus_i = C64::new(0.0, -1.0);
        if !self.off_diagonal.is_empty() {
            // −i O ρ
            for &(row, col, v) in &self.off_diagonal.entries {
                let f = minus_i * v;
                for l in 0..d {
                    out[row + l * d] += f * rho[col + l * d];
                }
            }
            // +i ρ O†
            for &(row, col, v) in &self.off_diagonal.entries {
                let f = -minus_i * v.conj();
                for k in 0..d {
                    out[k + row * d] += f * rho[k + col * d];
                }
            }
        }
        // Σ γ L ρ L†
        for (rate, op) in &self.jumps {
            for &(k, i, v) in &op.entries {
                for &(l, j, w) in &op.entries {
                    out[k + l * d] += v * w.conj() * *rate * rho[i + j * d];
                }
            }
        }
    }

    fn project(&self, rho: &mut [C64]) {
        let d = self.dim;
        for l in 0..d {
            for k in l..d {
                let avg = (rho[k + l * d] + rho[l + k * d].conj()) * 0.5;
                rho[k + l * d] = avg;
                rho[l + k * d] = avg.conj();
            }
        }
    }
}

pub(crate) fn flatten(m: &CMatrix) -> Vec<C64> {
    m.as_slice().to_vec()
}

pub(crate) fn unflatten(y: &[C64], dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, y)
}

/// Worst-case structural diagnostics over all samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            max_trace_drift: 0.0,
            max_hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

/// Integrates a density matrix under `generator`, checking trace drift and positivity
/// at every sample and handing each sampled matrix to `on_sample`.
pub(crate) fn integrate_density<F>(
    generator: &LindbladGenerator,
    rho0: &CMatrix,
    grid: &[f64],
    cfg: &IntegratorConfig,
    mut on_sample: F,
) -> Result<(CMatrix, Diagnostics, StepStats)>
where
    F: FnMut(f64, &CMatrix),
{
    let dim = generator.dim();
    if rho0.nrows() != dim || rho0.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: rho0.nrows(),
        });
    }
    let trace0 = rho0.trace().re;
    let mut diag = Diagnostics::default();
    let mut last = rho0.clone();
    let stats = integrator::integrate(generator, &flatten(rho0), grid, cfg, |_, t, y| {
        let rho = unflatten(y, dim);
        let drift = (rho.trace().re - trace0).abs();
        if drift >= TRACE_DRIFT_LIMIT {
            return Err(Error::TraceDriftExceeded {
                t,
                drift,
                limit: TRACE_DRIFT_LIMIT,
            });
        }
        let min_eig = fock::min_hermitian_eigenvalue(&rho);
        if min_eig <= POSITIVITY_LIMIT {
            return Err(Error::PositivityViolated {
                t,
                min_eigenvalue: min_eig,
            });
        }
        diag.max_trace_drift = diag.max_trace_drift.max(drift);
        diag.max_hermiticity_error = diag.max_hermiticity_error.max(hermiticity_error(&rho));
        diag.min_eigenvalue = diag.min_eigenvalue.min(min_eig);
        on_sample(t, &rho);
        last = rho;
        Ok(())
    })?;
    Ok((last, diag, stats))
}

#[derive(Debug, Clone)]
pub struct Evolution {
    pub series: TimeSeries,
    pub final_state: DensityMatrix,
    pub diagnostics: Diagnostics,
    pub stats: StepStats,
}

pub(crate) fn require_zero_start(grid: &[f64]) -> Result<()> {
    integrator::validate_grid(grid)?;
    if grid[0] != 0.0 {
        return Err(Error::InvalidGrid("time grid must start at 0".into()));
    }
    Ok(())
}

/// Dense evolution of a single-mode density matrix.
pub fn evolve(
    rho0: &DensityMatrix,
    channels: &[JumpChannel],
    kerr: KerrTerm,
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Evolution> {
    require_zero_start(grid)?;
    let cutoff = FockCutoff::new(rho0.dim().saturating_sub(1))?;
    let generator =
        LindbladGenerator::new(&kerr_hamiltonian(kerr, cutoff), &channel_operators(channels, cutoff)?)?
            .with_residue_period(residue_period(channels));
    let mut series = TimeSeries::with_capacity(grid.len());
    let (last, diagnostics, stats) =
        integrate_density(&generator, rho0.matrix(), grid, cfg, |t, rho| {
            series.push(t, rho.diagonal().iter().map(|c| c.re).collect());
        })?;
    Ok(Evolution {
        series,
        final_state: DensityMatrix::from_raw(last, rho0.trace_deficit()),
        diagnostics,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumProbe {
    /// Smallest nonzero |Re λ| over the whole Liouvillian spectrum.
    pub slowest_rate: Option<f64>,
    /// Same, restricted to the population block (ρ_kk).
    pub slowest_population_rate: Option<f64>,
}

pub const SPECTRUM_PROBE_MAX_NMAX: usize = 60;

/// Slowest nonzero decay rates of the Liouvillian.
///
/// With lowering jump operators and a number-diagonal Hamiltonian every term maps
/// |k⟩⟨l| to itself or to an element with smaller k + l, so ordered by k + l the
/// superoperator is triangular and its eigenvalues are its diagonal entries. The
/// triangularity is checked on the assembled superoperator, not assumed.
pub fn superoperator_spectrum_probe(
    channels: &[JumpChannel],
    kerr: KerrTerm,
    cutoff: FockCutoff,
) -> Result<SpectrumProbe> {
    if cutoff.nmax() > SPECTRUM_PROBE_MAX_NMAX {
        return Err(Error::InvalidConfig(format!(
            "spectrum probe limited to nmax <= {SPECTRUM_PROBE_MAX_NMAX}"
        )));
    }
    let generator =
        LindbladGenerator::new(&kerr_hamiltonian(kerr, cutoff), &channel_operators(channels, cutoff)?)?;
    let d = cutoff.dim();
    let mut basis = vec![C64::new(0.0, 0.0); d * d];
    let mut column = vec![C64::new(0.0, 0.0); d * d];
    let mut all = Vec::with_capacity(d * d);
    let mut populations = Vec::with_capacity(d);
    for l in 0..d {
        for k in 0..d {
            let idx = k + l * d;
            basis[idx] = C64::new(1.0, 0.0);
            generator.apply(&basis, &mut column);
            basis[idx] = C64::new(0.0, 0.0);
            for l2 in 0..d {
                for k2 in 0..d {
                    let j = k2 + l2 * d;
                    if j != idx && column[j] != C64::new(0.0, 0.0) && k2 + l2 >= k + l {
                        return Err(Error::UnsupportedChannels(
                            "Liouvillian is not triangular in the k + l ordering".into(),
                        ));
                    }
                }
            }
            let rate = -column[idx].re;
            all.push(rate);
            if k == l {
                populations.push(rate);
            }
        }
    }
    let scale = all.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0);
    let slowest = |rates: &[f64]| {
        rates
            .iter()
            .copied()
            .filter(|r| r.abs() > 1e-12 * scale)
            .map(f64::abs)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
    };
    Ok(SpectrumProbe {
        slowest_rate: slowest(&all),
        slowest_population_rate: slowest(&populations),
    })
}
