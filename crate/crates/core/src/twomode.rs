//! Two-mode model before adiabatic elimination: mode A coupled to a strongly damped
//! mode B through H = U4 a†a a b† + h.c., with linear loss Γb on B.
//!
//! Product basis index is `n_a * (nmax_b + 1) + n_b`.

use serde::Serialize;

use crate::analysis::{effective_rate, TimeSeries};
use crate::dynamics::{self, require_zero_start, Diagnostics, JumpChannel, KerrTerm, LindbladGenerator};
use crate::error::{Error, Result};
use crate::fock::{annihilation_matrix, jump_matrix, CMatrix, DensityMatrix, FockCutoff, Monomial, C64};
use crate::integrator::{IntegratorConfig, StepStats};

/// Below this Γb/|U4| the elimination regime is flagged.
pub const ELIMINATION_RATIO_WARNING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoModeParams {
    pub u4: C64,
    pub gamma_b: f64,
    /// Γa in Γe = Γa |2 U4/Γb|²; the flat-reservoir reading sets it equal to Γb.
    pub gamma_a_formula: f64,
    pub nmax_a: usize,
    pub nmax_b: usize,
}

impl TwoModeParams {
    /// Flat-reservoir parameters (Γa = Γb) with mode B cut at 4 photons.
    pub fn flat(u4: C64, gamma_b: f64, nmax_a: usize) -> Self {
        Self {
            u4,
            gamma_b,
            gamma_a_formula: gamma_b,
            nmax_a,
            nmax_b: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_b.is_nan() || self.gamma_b <= 0.0 {
            return Err(Error::NonpositiveGammaB(self.gamma_b));
        }
        if !(self.gamma_a_formula.is_finite() && self.gamma_a_formula >= 0.0) {
            return Err(Error::InvalidConfig("gamma_a must be nonnegative".into()));
        }
        FockCutoff::new(self.nmax_a)?;
        FockCutoff::new(self.nmax_b)?;
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let ratio = self.gamma_b / self.u4.norm();
        if ratio < ELIMINATION_RATIO_WARNING {
            w.push(format!(
                "gamma_b/|u4| = {ratio:.3} is below {ELIMINATION_RATIO_WARNING}; adiabatic elimination is not expected to hold"
            ));
        }
        w
    }

    pub fn effective_gamma_e(&self) -> Result<f64> {
        effective_rate(self.u4, self.gamma_b, self.gamma_a_formula)
    }

    fn dims(&self) -> (usize, usize) {
        (self.nmax_a + 1, self.nmax_b + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeState {
    dim_a: usize,
    dim_b: usize,
    matrix: CMatrix,
}

impl TwoModeState {
    pub fn from_matrix(dim_a: usize, dim_b: usize, matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != dim_a * dim_b {
            return Err(Error::DimensionMismatch {
                expected: dim_a * dim_b,
                found: matrix.nrows(),
            });
        }
        let matrix = DensityMatrix::from_matrix(matrix)?.into_matrix();
        Ok(Self {
            dim_a,
            dim_b,
            matrix,
        })
    }

    pub fn product(rho_a: &DensityMatrix, rho_b: &DensityMatrix) -> Self {
        Self {
            dim_a: rho_a.dim(),
            dim_b: rho_b.dim(),
            matrix: rho_a.matrix().kronecker(rho_b.matrix()),
        }
    }

    /// `ρ_A ⊗ |0⟩⟨0|`.
    pub fn with_vacuum_b(rho_a: &DensityMatrix, nmax_b: usize) -> Result<Self> {
        let vac = DensityMatrix::fock(0, FockCutoff::new(nmax_b)?)?;
        Ok(Self::product(rho_a, &vac))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn min_eigenvalue(&self) -> f64 {
        crate::fock::min_hermitian_eigenvalue(&self.matrix)
    }
}

fn trace_out_b(m: &CMatrix, dim_a: usize, dim_b: usize) -> CMatrix {
    CMatrix::from_fn(dim_a, dim_a, |i, k| {
        (0..dim_b)
            .map(|j| m[(i * dim_b + j, k * dim_b + j)])
            .sum()
    })
}

fn b_populations(m: &CMatrix, dim_a: usize, dim_b: usize) -> Vec<f64> {
    (0..dim_b)
        .map(|j| (0..dim_a).map(|i| m[(i * dim_b + j, i * dim_b + j)].re).sum())
        .collect()
}

/// Reduced state of mode A (mode B traced out).
pub fn partial_trace_a(rho: &TwoModeState) -> DensityMatrix {
    let reduced = trace_out_b(&rho.matrix, rho.dim_a, rho.dim_b);
    let deficit = 1.0 - reduced.trace().re;
    DensityMatrix::from_raw(reduced, deficit)
}

/// ⟨b†b⟩.
pub fn mode_b_occupation(rho: &TwoModeState) -> f64 {
    b_populations(&rho.matrix, rho.dim_a, rho.dim_b)
        .iter()
        .enumerate()
        .map(|(n, p)| n as f64 * p)
        .sum()
}

pub(crate) fn two_mode_generator(params: &TwoModeParams) -> Result<LindbladGenerator> {
    let cut_a = FockCutoff::new(params.nmax_a)?;
    let cut_b = FockCutoff::new(params.nmax_b)?;
    let id_a = CMatrix::identity(cut_a.dim(), cut_a.dim());
    let exchange_a = jump_matrix(Monomial::new(1, 2), cut_a)?;
    let b = annihilation_matrix(cut_b);
    let forward = exchange_a.kronecker(&b.adjoint()) * params.u4;
    let hamiltonian = &forward + forward.adjoint();
    let b_full = id_a.kronecker(&b);
    let jumps = if params.gamma_b > 0.0 {
        vec![(params.gamma_b, b_full)]
    } else {
        Vec::new()
    };
    Ok(LindbladGenerator::new(&hamiltonian, &jumps)?.explicit())
}

#[derive(Debug, Clone)]
pub struct TwoModeEvolution {
    /// Mode-A observables.
    pub series: TimeSeries,
    pub b_occupation: Vec<f64>,
    /// Largest population ever seen in the top retained B level.
    pub max_top_b_mass: f64,
    pub final_state: TwoModeState,
    pub diagnostics: Diagnostics,
    pub stats: StepStats,
    pub warnings: Vec<String>,
}

/// Mass allowed in the top B level before the B cutoff is reported as too small.
pub const TOP_B_MASS_LIMIT: f64 = 1e-10;

pub fn two_mode_evolve(
    rho0: &TwoModeState,
    params: &TwoModeParams,
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<TwoModeEvolution> {
    params.validate()?;
    require_zero_start(grid)?;
    let (dim_a, dim_b) = params.dims();
    if rho0.dims() != (dim_a, dim_b) {
        return Err(Error::DimensionMismatch {
            expected: dim_a * dim_b,
            found: rho0.dim_a * rho0.dim_b,
        });
    }
    let pb = b_populations(&rho0.matrix, dim_a, dim_b);
    let trace0 = rho0.matrix.trace().re;
    if (pb[0] - trace0).abs() > 1e-12 {
        return Err(Error::InvalidState("mode B must start in the vacuum".into()));
    }
    let generator = two_mode_generator(params)?;
    let mut series = TimeSeries::with_capacity(grid.len());
    let mut b_occupation = Vec::with_capacity(grid.len());
    let mut max_top = 0.0f64;
    let (last, diagnostics, stats) =
        dynamics::integrate_density(&generator, &rho0.matrix, grid, cfg, |t, rho| {
            let reduced = trace_out_b(rho, dim_a, dim_b);
            series.push(t, reduced.diagonal().iter().map(|c| c.re).collect());
            let pb = b_populations(rho, dim_a, dim_b);
            b_occupation.push(pb.iter().enumerate().map(|(n, p)| n as f64 * p).sum());
            max_top = max_top.max(pb[dim_b - 1]);
        })?;
    let mut warnings = params.warnings();
    if max_top >= TOP_B_MASS_LIMIT {
        warnings.push(format!(
            "top mode-B level reached population {max_top:e}; raise nmax_b"
        ));
    }
    Ok(TwoModeEvolution {
        series,
        b_occupation,
        max_top_b_mass: max_top,
        final_state: TwoModeState {
            dim_a,
            dim_b,
            matrix: last,
        },
        diagnostics,
        stats,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EliminationReport {
    pub gamma_b: f64,
    pub gamma_e: f64,
    /// sup over samples and levels of |p_n^A(two-mode) − p_n(effective)|.
    pub sup_error: f64,
    pub peak_b_occupation: f64,
    pub max_top_b_mass: f64,
    /// Structural diagnostics of the two-mode run.
    pub diagnostics: Diagnostics,
}

/// Runs the two-mode model from `ρ_A ⊗ |0⟩⟨0|` and the single-mode model with the
/// a†aa channel at the eliminated rate, and compares mode-A populations.
pub fn elimination_error(
    rho_a: &DensityMatrix,
    params: &TwoModeParams,
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<EliminationReport> {
    let gamma_e = params.effective_gamma_e()?;
    let two = two_mode_evolve(&TwoModeState::with_vacuum_b(rho_a, params.nmax_b)?, params, grid, cfg)?;
    let single = dynamics::evolve(rho_a, &[JumpChannel::effective(gamma_e)], KerrTerm::default(), grid, cfg)?;
    let sup_error = two
        .series
        .populations
        .iter()
        .zip(&single.series.populations)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(EliminationReport {
        gamma_b: params.gamma_b,
        gamma_e,
        sup_error,
        peak_b_occupation: two.b_occupation.iter().copied().fold(0.0, f64::max),
        max_top_b_mass: two.max_top_b_mass,
        diagnostics: two.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::CVector;
    use crate::integrator::uniform_grid;

    fn cutoff(n: usize) -> FockCutoff {
        FockCutoff::new(n).unwrap()
    }

    #[test]
    fn product_with_vacuum_traces_back() {
        let rho_a = DensityMatrix::coherent(C64::new(0.8, 0.3), cutoff(15)).unwrap();
        let s = TwoModeState::with_vacuum_b(&rho_a, 3).unwrap();
        assert!((partial_trace_a(&s).matrix() - rho_a.matrix()).norm() < 1e-15);
        assert_eq!(mode_b_occupation(&s), 0.0);
    }

    #[test]
    fn maximally_mixed_reduction() {
        let half = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        let s = TwoModeState::product(&half, &half);
        let r = partial_trace_a(&s);
        assert!((r.matrix() - half.matrix()).norm() < 1e-15);
    }

    #[test]
    fn entangled_reduction() {
        // (|1,0⟩ + |0,1⟩)/√2 with dim_b = 2: indices 2 and 1
        let mut v = crate::fock::CVector::zeros(4);
        v[2] = C64::new(0.5f64.sqrt(), 0.0);
        v[1] = C64::new(0.5f64.sqrt(), 0.0);
        let s = TwoModeState::from_matrix(2, 2, &v * v.adjoint()).unwrap();
        let r = partial_trace_a(&s);
        assert!((r.populations()[0] - 0.5).abs() < 1e-15);
        assert!((r.populations()[1] - 0.5).abs() < 1e-15);
        assert!(r.matrix()[(0, 1)].norm() < 1e-15);
        assert!((mode_b_occupation(&s) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_photon_in_b() {
        let vac = DensityMatrix::fock(0, cutoff(2)).unwrap();
        let one = DensityMatrix::fock(1, cutoff(2)).unwrap();
        assert_eq!(mode_b_occupation(&TwoModeState::product(&vac, &one)), 1.0);
    }

    #[test]
    fn single_photon_in_a_is_stationary() {
        let params = TwoModeParams::flat(C64::new(1.0, 0.0), 50.0, 4);
        let rho_a = DensityMatrix::fock(1, cutoff(4)).unwrap();
        let s = TwoModeState::with_vacuum_b(&rho_a, params.nmax_b).unwrap();
        let ev = two_mode_evolve(&s, &params, &uniform_grid(5.0, 6), &IntegratorConfig::default()).unwrap();
        for p in &ev.series.populations {
            assert!((p[1] - 1.0).abs() < 1e-14);
        }
        assert!(ev.b_occupation.iter().all(|&n| n.abs() < 1e-14));
    }

    #[test]
    fn exchange_conserves_total_excitation() {
        // Γb = 0: only the exchange Hamiltonian acts
        let u4 = C64::new(0.7, 0.2);
        let (cut_a, cut_b) = (cutoff(6), cutoff(4));
        let (dim_a, dim_b) = (7, 5);
        let exchange = jump_matrix(Monomial::new(1, 2), cut_a).unwrap();
        let forward = exchange.kronecker(&annihilation_matrix(cut_b).adjoint()) * u4;
        let generator = LindbladGenerator::new(&(&forward + forward.adjoint()), &[]).unwrap();

        // (|2,0⟩ + i|1,1⟩)/√2: the exchange couples the two terms, so ⟨n_A⟩ moves
        let mut psi = CVector::zeros(dim_a * dim_b);
        psi[2 * dim_b] = C64::new(0.5f64.sqrt(), 0.0);
        psi[dim_b + 1] = C64::new(0.0, 0.5f64.sqrt());
        let rho = &psi * psi.adjoint();
        let mut out = vec![C64::new(0.0, 0.0); rho.len()];
        generator.apply(rho.as_slice(), &mut out);
        let d = CMatrix::from_column_slice(dim_a * dim_b, dim_a * dim_b, &out);

        let n_a = crate::fock::number_matrix(cut_a).kronecker(&CMatrix::identity(dim_b, dim_b));
        let n_b = CMatrix::identity(dim_a, dim_a).kronecker(&crate::fock::number_matrix(cut_b));
        let da = (&n_a * &d).trace().re;
        let db = (&n_b * &d).trace().re;
        assert!(da.abs() > 1e-3);
        assert!((da + db).abs() < 1e-10);
    }

    #[test]
    fn warnings_and_validation() {
        assert!(!TwoModeParams::flat(C64::new(1.0, 0.0), 5.0, 4).warnings().is_empty());
        assert!(TwoModeParams::flat(C64::new(1.0, 0.0), 50.0, 4).warnings().is_empty());
        assert!(TwoModeParams::flat(C64::new(1.0, 0.0), 0.0, 4).validate().is_err());
    }

    #[test]
    fn b_must_start_empty() {
        let params = TwoModeParams::flat(C64::new(1.0, 0.0), 50.0, 2);
        let a = DensityMatrix::fock(1, cutoff(2)).unwrap();
        let b = DensityMatrix::fock(1, cutoff(4)).unwrap();
        let s = TwoModeState::product(&a, &b);
        assert!(two_mode_evolve(&s, &params, &[0.0, 1.0], &IntegratorConfig::default()).is_err());
    }
}
