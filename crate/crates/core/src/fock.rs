//! Single-mode Fock-basis states and ladder operators.
//!
//! Basis ordering is ascending photon number, `|0⟩ .. |nmax⟩`, everywhere in the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Largest Poisson mass allowed beyond the cutoff for coherent inputs.
pub const COHERENT_TAIL_LIMIT: f64 = 1e-12;

const HERMITICITY_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockCutoff {
    nmax: usize,
}

impl FockCutoff {
    pub fn new(nmax: usize) -> Result<Self> {
        if nmax < 1 {
            return Err(Error::InvalidCutoff);
        }
        Ok(Self { nmax })
    }

    /// Cutoff checked against the Poisson tail of a coherent state of amplitude `alpha`.
    pub fn for_coherent(alpha: C64, nmax: usize) -> Result<Self> {
        let cutoff = Self::new(nmax)?;
        let tail = poisson_tail(alpha.norm_sqr(), nmax);
        if tail >= COHERENT_TAIL_LIMIT {
            return Err(Error::CutoffTooSmall {
                nmax,
                tail,
                limit: COHERENT_TAIL_LIMIT,
            });
        }
        Ok(cutoff)
    }

    pub fn nmax(&self) -> usize {
        self.nmax
    }

    pub fn dim(&self) -> usize {
        self.nmax + 1
    }
}

/// Poisson probability mass strictly above `nmax` for the given mean.
///
/// Summed directly from the tail terms so tiny masses are not lost to cancellation.
pub fn poisson_tail(mean: f64, nmax: usize) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let mut ln_term = -mean;
    for n in 1..=nmax + 1 {
        ln_term += mean.ln() - (n as f64).ln();
    }
    let mut n = nmax + 1;
    let mut tail = 0.0;
    loop {
        let term = ln_term.exp();
        tail += term;
        // terms decrease geometrically once n exceeds the mean
        if (n as f64) > mean && term < tail * 1e-17 {
            break;
        }
        if n > nmax + 10_000 {
            break;
        }
        n += 1;
        ln_term += mean.ln() - (n as f64).ln();
    }
    tail
}

pub fn annihilation_matrix(cutoff: FockCutoff) -> CMatrix {
    let dim = cutoff.dim();
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

pub fn creation_matrix(cutoff: FockCutoff) -> CMatrix {
    annihilation_matrix(cutoff).adjoint()
}

pub fn number_matrix(cutoff: FockCutoff) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        cutoff.dim(),
        (0..cutoff.dim()).map(|n| C64::new(n as f64, 0.0)),
    ))
}

/// Normally ordered monomial `(a†)^creation a^annihilation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub creation: u32,
    pub annihilation: u32,
}

impl Monomial {
    pub const fn new(creation: u32, annihilation: u32) -> Self {
        Self {
            creation,
            annihilation,
        }
    }

    /// Net number of photons removed.
    pub fn lowering(&self) -> i64 {
        self.annihilation as i64 - self.creation as i64
    }

    /// Squared matrix element `|⟨n − lowering| (a†)^j a^k |n⟩|²`, exact in integer
    /// arithmetic while it fits in an f64 mantissa. Zero when `n < k`.
    pub fn amplitude_sq(&self, n: usize) -> f64 {
        let k = self.annihilation as usize;
        if n < k {
            return 0.0;
        }
        let m = n - k;
        (0..k)
            .map(|i| (n - i) as f64)
            .chain((1..=self.creation as usize).map(|i| (m + i) as f64))
            .product()
    }

    /// Exact matrix element `⟨n − lowering| (a†)^j a^k |n⟩`, or `None` when it vanishes
    /// (`n < k`). No cutoff is applied to the raised level.
    pub fn amplitude(&self, n: usize) -> Option<f64> {
        let sq = self.amplitude_sq(n);
        (sq != 0.0).then(|| sq.sqrt())
    }
}

/// Matrix of `(A†)^j A^k` at the cutoff, built by matrix products.
pub fn jump_matrix(monomial: Monomial, cutoff: FockCutoff) -> Result<CMatrix> {
    if monomial.annihilation as usize > cutoff.nmax() {
        return Err(Error::MonomialAnnihilatesSpace {
            creation: monomial.creation,
            annihilation: monomial.annihilation,
            nmax: cutoff.nmax(),
        });
    }
    let a = annihilation_matrix(cutoff);
    let ad = a.adjoint();
    let dim = cutoff.dim();
    let mut m = CMatrix::identity(dim, dim);
    for _ in 0..monomial.annihilation {
        m = &a * m;
    }
    for _ in 0..monomial.creation {
        m = &ad * m;
    }
    Ok(m)
}

/// Coherent-state amplitudes `e^{−|α|²/2} αⁿ/√n!`, truncated and not renormalized.
fn coherent_amplitudes(alpha: C64, dim: usize) -> CVector {
    let mut amps = CVector::zeros(dim);
    amps[0] = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 1..dim {
        amps[n] = amps[n - 1] * alpha / (n as f64).sqrt();
    }
    amps
}

#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: CVector,
}

impl PureState {
    pub fn new(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() >= TRACE_TOL {
            return Err(Error::InvalidState(format!(
                "state vector norm {norm} deviates from 1"
            )));
        }
        Ok(Self { amplitudes })
    }

    pub fn fock(n: usize, cutoff: FockCutoff) -> Result<Self> {
        if n > cutoff.nmax() {
            return Err(Error::InvalidState(format!(
                "Fock level {n} above cutoff {}",
                cutoff.nmax()
            )));
        }
        let mut amps = CVector::zeros(cutoff.dim());
        amps[n] = C64::new(1.0, 0.0);
        Ok(Self { amplitudes: amps })
    }

    pub fn coherent(alpha: C64, cutoff: FockCutoff) -> Result<Self> {
        let cutoff = FockCutoff::for_coherent(alpha, cutoff.nmax())?;
        Ok(Self {
            amplitudes: coherent_amplitudes(alpha, cutoff.dim()),
        })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMatrix,
    trace_deficit: f64,
}

impl DensityMatrix {
    /// Validates Hermiticity and unit trace.
    pub fn from_matrix(matrix: CMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidState(format!(
                "density matrix is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let herm = hermiticity_error(&matrix);
        if herm >= HERMITICITY_TOL {
            return Err(Error::InvalidState(format!(
                "matrix is not Hermitian (max deviation {herm:e})"
            )));
        }
        let trace = matrix.trace().re;
        if (trace - 1.0).abs() >= TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {trace} deviates from 1")));
        }
        Ok(Self {
            trace_deficit: 1.0 - trace,
            matrix,
        })
    }

    /// Wraps an integrator output without validation.
    pub(crate) fn from_raw(matrix: CMatrix, trace_deficit: f64) -> Self {
        Self {
            matrix,
            trace_deficit,
        }
    }

    pub fn fock(n: usize, cutoff: FockCutoff) -> Result<Self> {
        Ok(Self::from_pure(&PureState::fock(n, cutoff)?))
    }

    /// Diagonal state with the given populations (must sum to one).
    pub fn diagonal(populations: &[f64]) -> Result<Self> {
        if populations.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidState("negative population".into()));
        }
        let diag = CVector::from_iterator(
            populations.len(),
            populations.iter().map(|&p| C64::new(p, 0.0)),
        );
        Self::from_matrix(CMatrix::from_diagonal(&diag))
    }

    /// `|α⟩⟨α|` truncated at the cutoff; the missing tail mass is kept as `trace_deficit`.
    pub fn coherent(alpha: C64, cutoff: FockCutoff) -> Result<Self> {
        Ok(Self::from_pure(&PureState::coherent(alpha, cutoff)?))
    }

    pub fn from_pure(psi: &PureState) -> Self {
        let v = psi.amplitudes();
        let matrix = v * v.adjoint();
        let trace = matrix.trace().re;
        Self {
            matrix,
            trace_deficit: 1.0 - trace,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// `1 − tr ρ` recorded at construction.
    pub fn trace_deficit(&self) -> f64 {
        self.trace_deficit
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|c| c.re).collect()
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_hermitian_eigenvalue(&self.matrix)
    }
}

/// `max |m_kl − conj(m_lk)|`.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for k in 0..n {
        for l in k..n {
            worst = worst.max((m[(k, l)] - m[(l, k)].conj()).norm());
        }
    }
    worst
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_hermitian_eigenvalue(m: &CMatrix) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    herm.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
