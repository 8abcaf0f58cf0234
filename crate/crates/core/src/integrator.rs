//! Adaptive Dormand–Prince 5(4) integration in integrating-factor (Lawson) form.
//!
//! Systems are split as `dy/dt = λ ∘ y + N(y)` with a diagonal generator `λ`
//! (`Re λ ≤ 0`) propagated exactly by `exp(λ h)` and the remainder `N` handled by
//! the explicit Runge–Kutta stages. Multi-photon cascades have diagonal loss rates
//! growing like n³, so treating them exactly removes the stiffness from the step
//! size selection; the step is then limited only by the accuracy of the gain terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::C64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    /// Disables step-size control; every sample interval is split into equal steps
    /// no longer than this.
    pub fixed_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            max_step: 1.0,
            fixed_step: None,
        }
    }
}

impl IntegratorConfig {
    pub fn fixed(step: f64) -> Self {
        Self {
            fixed_step: Some(step),
            ..Self::default()
        }
    }

    /// Same configuration with both tolerances divided by `factor`.
    pub fn tightened(&self, factor: f64) -> Self {
        Self {
            abs_tol: self.abs_tol / factor,
            rel_tol: self.rel_tol / factor,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.abs_tol) || !positive(self.rel_tol) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if !positive(self.max_step) {
            return Err(Error::InvalidConfig("max_step must be positive".into()));
        }
        if let Some(h) = self.fixed_step {
            if !positive(h) {
                return Err(Error::InvalidConfig("fixed_step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// An ODE `dy/dt = decay ∘ y + coupling(y)` over complex components.
pub trait SplitSystem: Sync {
    fn len(&self) -> usize;

    /// Diagonal generator. Real parts must be nonpositive.
    fn decay(&self) -> &[C64];

    /// Writes the non-diagonal remainder of the generator into `out`.
    fn coupling(&self, y: &[C64], out: &mut [C64]);

    /// Applied after every accepted step.
    fn project(&self, _y: &mut [C64]) {}

    /// Largest change over a step among the linear functionals the exact flow
    /// preserves, such as the trace. It is held to a fraction of `abs_tol`, which the
    /// embedded error estimate alone does not guarantee for exponentially treated
    /// stiff components.
    fn invariant_drift(&self, _before: &[C64], _after: &[C64]) -> f64 {
        0.0
    }
}

/// Per-step budget for invariant drift, as a fraction of `abs_tol`.
const INVARIANT_FRACTION: f64 = 0.001;

/// Largest change of the residue-class sums Σ_{n ≡ r mod period} Re y[index(n)].
pub(crate) fn residue_drift(
    before: &[C64],
    after: &[C64],
    levels: usize,
    period: usize,
    index: impl Fn(usize) -> usize,
) -> f64 {
    (0..period)
        .map(|r| {
            (r..levels)
                .step_by(period)
                .map(|n| after[index(n)].re - before[index(n)].re)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Components below this magnitude are set to zero after each step. Decaying
/// amplitudes otherwise drift into subnormal range, where arithmetic is very slow.
const NEGLIGIBLE: f64 = 1e-200;

fn flush_negligible(y: &mut [C64]) {
    for v in y.iter_mut() {
        if v.re.abs() < NEGLIGIBLE {
            v.re = 0.0;
        }
        if v.im.abs() < NEGLIGIBLE {
            v.im = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty time grid".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("non-finite time".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("times must be strictly ascending".into()));
    }
    Ok(())
}

/// Uniform grid of `samples` points on `[0, t_max]`.
pub fn uniform_grid(t_max: f64, samples: usize) -> Vec<f64> {
    if samples <= 1 {
        return vec![0.0];
    }
    let last = (samples - 1) as f64;
    (0..samples).map(|i| t_max * i as f64 / last).collect()
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Workspace {
    stages: Vec<Vec<C64>>,
    scratch: Vec<C64>,
    y_new: Vec<C64>,
    err: Vec<C64>,
    // (fraction of h, exp(decay * fraction * h)) for the current h
    factors: Vec<(f64, Vec<C64>)>,
    factor_h: f64,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            stages: vec![vec![C64::new(0.0, 0.0); n]; 7],
            scratch: vec![C64::new(0.0, 0.0); n],
            y_new: vec![C64::new(0.0, 0.0); n],
            err: vec![C64::new(0.0, 0.0); n],
            factors: Vec::new(),
            factor_h: f64::NAN,
        }
    }

    fn prepare(&mut self, decay: &[C64], h: f64) {
        if self.factor_h == h {
            return;
        }
        self.factor_h = h;
        self.factors.clear();
        if decay.iter().all(|l| *l == C64::new(0.0, 0.0)) {
            // plain Runge–Kutta; every factor is one
            return;
        }
        let mut fractions: Vec<f64> = Vec::new();
        for i in 0..7 {
            fractions.push(C[i]);
            fractions.push(1.0 - C[i]);
            for j in 0..i {
                fractions.push(C[i] - C[j]);
            }
        }
        for frac in fractions {
            if frac == 0.0 || self.factors.iter().any(|(f, _)| *f == frac) {
                continue;
            }
            let v = decay
                .iter()
                .map(|&l| {
                    if l.im == 0.0 {
                        C64::new((l.re * frac * h).exp(), 0.0)
                    } else {
                        (l * (frac * h)).exp()
                    }
                })
                .collect();
            self.factors.push((frac, v));
        }
    }

    fn factor(&self, frac: f64) -> Option<&[C64]> {
        if frac == 0.0 {
            return None;
        }
        self.factors
            .iter()
            .find(|(f, _)| *f == frac)
            .map(|(_, v)| v.as_slice())
    }
}

fn scale_by(out: &mut [C64], y: &[C64], factor: Option<&[C64]>) {
    match factor {
        Some(f) => {
            for ((o, &yi), &fi) in out.iter_mut().zip(y).zip(f) {
                *o = yi * fi;
            }
        }
        None => out.copy_from_slice(y),
    }
}

fn add_scaled(out: &mut [C64], coeff: f64, k: &[C64], factor: Option<&[C64]>) {
    if coeff == 0.0 {
        return;
    }
    match factor {
        Some(f) => {
            for ((o, &ki), &fi) in out.iter_mut().zip(k).zip(f) {
                *o += ki * fi * coeff;
            }
        }
        None => {
            for (o, &ki) in out.iter_mut().zip(k) {
                *o += ki * coeff;
            }
        }
    }
}

/// One Lawson–DP5 step from `y` over `h`; leaves the result in `ws.y_new` and the
/// local error vector in `ws.err` when `with_error` is set.
fn lawson_step<S: SplitSystem>(sys: &S, y: &[C64], h: f64, ws: &mut Workspace, with_error: bool) {
    ws.prepare(sys.decay(), h);
    let mut k = std::mem::take(&mut ws.stages);
    let mut u = std::mem::take(&mut ws.scratch);
    sys.coupling(y, &mut k[0]);
    for i in 1..7 {
        scale_by(&mut u, y, ws.factor(C[i]));
        for j in 0..i {
            add_scaled(&mut u, h * A[i][j], &k[j], ws.factor(C[i] - C[j]));
        }
        if i == 6 {
            ws.y_new.copy_from_slice(&u);
        }
        sys.coupling(&u, &mut k[i]);
    }
    if with_error {
        ws.err.iter_mut().for_each(|e| *e = C64::new(0.0, 0.0));
        let mut err = std::mem::take(&mut ws.err);
        for j in 0..7 {
            add_scaled(&mut err, h * E[j], &k[j], ws.factor(1.0 - C[j]));
        }
        ws.err = err;
    }
    ws.stages = k;
    ws.scratch = u;
}

/// Quadrature defect of the fifth-order weights on `exp(z s)` over `s ∈ [0, 1]`.
///
/// Gain fed by a component decaying at rate `λ` is integrated with these weights,
/// so `|λ h| · |y| · defect(λ h)` bounds the error it deposits elsewhere. The
/// embedded estimate misses this once `|λ h|` is large because both solutions share
/// the same stage values.
fn quadrature_defect(z: C64, e: &[C64; 7]) -> f64 {
    let exact = if z.norm() < 0.1 {
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for k in 1..10 {
            term = term * z / (k + 1) as f64;
            sum += term;
        }
        sum
    } else {
        (e[6] - 1.0) / z
    };
    let mut quad = C64::new(0.0, 0.0);
    for j in 0..6 {
        quad += e[j] * A[6][j];
    }
    (quad - exact).norm()
}

fn error_norm(
    y: &[C64],
    y_new: &[C64],
    err: &[C64],
    decay: &[C64],
    h: f64,
    ws: &Workspace,
    cfg: &IntegratorConfig,
) -> f64 {
    let one = C64::new(1.0, 0.0);
    let sum: f64 = (0..y.len())
        .map(|i| {
            let (a, b) = (y[i], y_new[i]);
            let sc = cfg.abs_tol + cfg.rel_tol * a.norm().max(b.norm());
            let mut e = err[i].norm();
            let z = decay[i] * h;
            if z.norm() > 1e-3 && a.norm() > 0.0 {
                let mut ex = [one; 7];
                for (j, slot) in ex.iter_mut().enumerate() {
                    if let Some(f) = ws.factor(C[j]) {
                        *slot = f[i];
                    }
                }
                e += z.norm() * a.norm() * quadrature_defect(z, &ex);
            }
            (e / sc).powi(2)
        })
        .sum();
    (sum / y.len().max(1) as f64).sqrt()
}

fn initial_step<S: SplitSystem>(sys: &S, y: &[C64], cfg: &IntegratorConfig) -> f64 {
    let mut f = vec![C64::new(0.0, 0.0); y.len()];
    sys.coupling(y, &mut f);
    for ((fi, &yi), &l) in f.iter_mut().zip(y).zip(sys.decay()) {
        *fi += l * yi;
    }
    let scaled = |v: &[C64]| {
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(vi, yi)| (vi.norm() / (cfg.abs_tol + cfg.rel_tol * yi.norm())).powi(2))
            .sum();
        (s / y.len().max(1) as f64).sqrt()
    };
    let d0 = scaled(y);
    let d1 = scaled(&f);
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(cfg.max_step)
}

/// Integrates from `grid[0]` through every grid point, calling `observe(index, t, y)`
/// at each one (including the initial point).
pub fn integrate<S, F>(
    sys: &S,
    y0: &[C64],
    grid: &[f64],
    cfg: &IntegratorConfig,
    mut observe: F,
) -> Result<StepStats>
where
    S: SplitSystem,
    F: FnMut(usize, f64, &[C64]) -> Result<()>,
{
    cfg.validate()?;
    validate_grid(grid)?;
    if y0.len() != sys.len() || sys.decay().len() != sys.len() {
        return Err(Error::DimensionMismatch {
            expected: sys.len(),
            found: y0.len(),
        });
    }
    let mut y = y0.to_vec();
    let mut t = grid[0];
    let mut stats = StepStats::default();
    let mut ws = Workspace::new(y.len());
    observe(0, t, &y)?;

    if let Some(fixed) = cfg.fixed_step {
        for (idx, &target) in grid.iter().enumerate().skip(1) {
            let span = target - t;
            let n = (span / fixed - 1e-9).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                lawson_step(sys, &y, h, &mut ws, false);
                std::mem::swap(&mut y, &mut ws.y_new);
                sys.project(&mut y);
                flush_negligible(&mut y);
                stats.accepted += 1;
            }
            t = target;
            observe(idx, t, &y)?;
        }
        return Ok(stats);
    }

    const SAFETY: f64 = 0.9;
    const BETA: f64 = 0.04;
    const EXPO: f64 = 0.2 - BETA * 0.75;
    let mut h = initial_step(sys, &y, cfg);
    let mut err_old: f64 = 1e-4;
    for (idx, &target) in grid.iter().enumerate().skip(1) {
        while t < target {
            let remaining = target - t;
            let landing = h >= remaining;
            let h_try = if landing { remaining } else { h.min(cfg.max_step) };
            if h_try < 1e-14 * t.abs().max(1.0) {
                return Err(Error::StepSizeUnderflow { t, h: h_try });
            }
            lawson_step(sys, &y, h_try, &mut ws, true);
            let mut err = error_norm(&y, &ws.y_new, &ws.err, sys.decay(), h_try, &ws, cfg);
            err = err.max(sys.invariant_drift(&y, &ws.y_new) / (INVARIANT_FRACTION * cfg.abs_tol));
            if !err.is_finite() {
                h = h_try * 0.1;
                stats.rejected += 1;
                continue;
            }
            let fac_raw = err.powf(EXPO);
            if err <= 1.0 {
                let fac = (fac_raw / err_old.powf(BETA) / SAFETY).clamp(0.2, 10.0);
                err_old = err.max(1e-4);
                std::mem::swap(&mut y, &mut ws.y_new);
                sys.project(&mut y);
                flush_negligible(&mut y);
                stats.accepted += 1;
                t = if landing { target } else { t + h_try };
                let proposal = (h_try / fac).min(cfg.max_step);
                // a shortened landing step says nothing about the natural step size
                h = if landing { proposal.max(h) } else { proposal };
            } else {
                h = h_try / (fac_raw / SAFETY).min(5.0);
                stats.rejected += 1;
            }
        }
        observe(idx, t, &y)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-level cascade y1' = −λ y1, y0' = λ y1 with the loss in the diagonal part.
    struct Cascade {
        decay: Vec<C64>,
        rate: f64,
    }

    impl SplitSystem for Cascade {
        fn len(&self) -> usize {
            2
        }
        fn decay(&self) -> &[C64] {
            &self.decay
        }
        fn coupling(&self, y: &[C64], out: &mut [C64]) {
            out[0] = y[1] * self.rate;
            out[1] = C64::new(0.0, 0.0);
        }
        fn invariant_drift(&self, before: &[C64], after: &[C64]) -> f64 {
            residue_drift(before, after, 2, 1, |n| n)
        }
    }

    /// Harmonic oscillator with nothing in the diagonal part.
    struct Rotation;

    impl SplitSystem for Rotation {
        fn len(&self) -> usize {
            2
        }
        fn decay(&self) -> &[C64] {
            const Z: [C64; 2] = [C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
            &Z
        }
        fn coupling(&self, y: &[C64], out: &mut [C64]) {
            out[0] = y[1];
            out[1] = -y[0];
        }
    }

    fn cascade(rate: f64) -> Cascade {
        Cascade {
            decay: vec![C64::new(0.0, 0.0), C64::new(-rate, 0.0)],
            rate,
        }
    }

    #[test]
    fn stiff_cascade_is_exact_and_cheap() {
        let sys = cascade(1e5);
        let grid = uniform_grid(10.0, 11);
        let y0 = [C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let mut last = 0.0;
        let stats = integrate(&sys, &y0, &grid, &IntegratorConfig::default(), |_, t, y| {
            if t > 0.0 {
                assert!((y[1].re - (-1e5 * t).exp()).abs() < 1e-12);
                last = y[0].re;
            }
            Ok(())
        })
        .unwrap();
        assert!((last - 1.0).abs() < 1e-10, "{last} {stats:?}");
        assert!(stats.accepted < 2000, "{stats:?}");
    }

    #[test]
    fn rotation_accuracy() {
        let y0 = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let grid = uniform_grid(10.0, 21);
        integrate(&Rotation, &y0, &grid, &IntegratorConfig::default(), |_, t, y| {
            assert!((y[0].re - t.cos()).abs() < 1e-7);
            assert!((y[1].re + t.sin()).abs() < 1e-7);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn fixed_step_converges_at_fifth_order() {
        let y0 = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let grid = [0.0, 5.0];
        let err_at = |h: f64| {
            let mut e = 0.0;
            integrate(&Rotation, &y0, &grid, &IntegratorConfig::fixed(h), |_, t, y| {
                e = (y[0].re - t.cos()).abs();
                Ok(())
            })
            .unwrap();
            e
        };
        // the asymptotic regime for this tableau starts below h ≈ 0.05
        let ratio = err_at(0.025) / err_at(0.0125);
        assert!(ratio > 25.0 && ratio < 45.0, "ratio {ratio}");
    }

    #[test]
    fn fixed_step_is_repeatable() {
        let sys = cascade(3.0);
        let y0 = [C64::new(0.2, 0.0), C64::new(0.8, 0.0)];
        let grid = uniform_grid(2.0, 7);
        let run = || {
            let mut out = Vec::new();
            integrate(&sys, &y0, &grid, &IntegratorConfig::fixed(0.013), |_, _, y| {
                out.push(y[0].re.to_bits());
                Ok(())
            })
            .unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.0, 1.0, 1.0]).is_err());
        assert!(validate_grid(&[0.0, f64::NAN]).is_err());
        let bad = IntegratorConfig {
            abs_tol: 0.0,
            ..IntegratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
