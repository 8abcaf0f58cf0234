use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cutoff nmax={nmax} too small: Poisson tail mass {tail:e} is not below {limit:e}")]
    CutoffTooSmall { nmax: usize, tail: f64, limit: f64 },

    #[error("invalid cutoff: nmax must be at least 1")]
    InvalidCutoff,

    #[error("monomial a†^{creation} a^{annihilation} annihilates the whole space at nmax={nmax}")]
    MonomialAnnihilatesSpace {
        creation: u32,
        annihilation: u32,
        nmax: usize,
    },

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),

    #[error("step size underflow at t={t}: h={h:e}")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("trace drift {drift:e} at t={t} exceeds {limit:e}")]
    TraceDriftExceeded { t: f64, drift: f64, limit: f64 },

    #[error("positivity violated at t={t}: minimum eigenvalue {min_eigenvalue:e}")]
    PositivityViolated { t: f64, min_eigenvalue: f64 },

    #[error("channel set not supported here: {0}")]
    UnsupportedChannels(String),

    #[error("no closed-form steady state for channel set {0}")]
    NoClosedForm(String),

    #[error("gamma_b must be positive, got {0}")]
    NonpositiveGammaB(f64),

    #[error("sigma(n) has no interior minimum on [{t_lo}, {t_hi}]")]
    NoInteriorMinimum { t_lo: f64, t_hi: f64 },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepSizeUnderflow { .. }
                | Error::TraceDriftExceeded { .. }
                | Error::PositivityViolated { .. }
        )
    }
}
