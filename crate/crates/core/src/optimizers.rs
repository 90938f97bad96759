//! Baseline one-step maps (fixed-step and short-step gradient, Nesterov
//! momentum in its strongly convex and convex variants), the Chebyshev
//! semi-iterative method for quadratics, and the polynomial built implicitly
//! by momentum recursions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid stepper constants: L = {l}, mu = {mu} for {kind:?}")]
    InvalidSpec { kind: StepperKind, l: f64, mu: f64 },
    #[error("gradient oracle returned a non-finite value")]
    Diverged,
    #[error("invalid spectrum: sigma = 1 - mu/L = {0} must be < 1")]
    InvalidSpectrum(f64),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepperKind {
    /// `x - 2/(L+mu) grad(x)`.
    GradientFixed,
    /// `x - (1/L) grad(x)`.
    GradientShort,
    /// Constant momentum `(sqrt L - sqrt mu)/(sqrt L + sqrt mu)`; needs mu > 0.
    NesterovStrong,
    /// Momentum from `t_{k+1} = (1 + sqrt(1 + 4 t_k^2))/2`, `beta_k = (t_k - 1)/t_{k+1}`.
    NesterovConvex,
    Chebyshev,
}

#[derive(Debug, Clone, Copy)]
pub struct StepperSpec {
    pub kind: StepperKind,
    pub l: f64,
    pub mu: f64,
}

impl StepperSpec {
    pub fn new(kind: StepperKind, l: f64, mu: f64) -> Result<Self> {
        let mu_ok = match kind {
            StepperKind::GradientShort | StepperKind::NesterovConvex => mu >= 0.0,
            _ => mu > 0.0,
        };
        if !(l > 0.0 && l.is_finite() && mu_ok && mu <= l) {
            return Err(OptimizerError::InvalidSpec { kind, l, mu });
        }
        Ok(Self { kind, l, mu })
    }

    pub fn step_size(&self) -> f64 {
        match self.kind {
            StepperKind::GradientFixed => 2.0 / (self.l + self.mu),
            _ => 1.0 / self.l,
        }
    }
}

pub fn gradient_step<G>(x: &DVector<f64>, mut grad: G, spec: &StepperSpec) -> Result<DVector<f64>>
where
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    debug_assert!(matches!(
        spec.kind,
        StepperKind::GradientFixed | StepperKind::GradientShort
    ));
    let g = grad(x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OptimizerError::Diverged);
    }
    Ok(x - g * spec.step_size())
}

/// Momentum state: the previous primal iterate, the lookahead point, and the
/// running `t_k` of the convex variant.
#[derive(Debug, Clone)]
pub struct NesterovState {
    pub x_prev: DVector<f64>,
    pub y: DVector<f64>,
    t: f64,
}

impl NesterovState {
    pub fn new(x0: DVector<f64>) -> Self {
        Self {
            x_prev: x0.clone(),
            y: x0,
            t: 1.0,
        }
    }

    pub fn current(&self) -> &DVector<f64> {
        &self.x_prev
    }
}

pub fn nesterov_step<G>(
    state: &NesterovState,
    mut grad: G,
    spec: &StepperSpec,
) -> Result<NesterovState>
where
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let g = grad(&state.y);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OptimizerError::Diverged);
    }
    let x_new = &state.y - g * (1.0 / spec.l);
    let (beta, t_new) = match spec.kind {
        StepperKind::NesterovStrong => {
            let (sl, sm) = (spec.l.sqrt(), spec.mu.sqrt());
            ((sl - sm) / (sl + sm), state.t)
        }
        StepperKind::NesterovConvex => {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * state.t * state.t).sqrt());
            ((state.t - 1.0) / t_next, t_next)
        }
        _ => (0.0, state.t),
    };
    let y_new = &x_new + (&x_new - &state.x_prev) * beta;
    Ok(NesterovState {
        x_prev: x_new,
        y: y_new,
        t: t_new,
    })
}

/// Runs the two-term Chebyshev recurrence on the quadratic `x'Bx/2 - b'x`
/// with `mu I <= B <= L I`, returning `y_0 .. y_k`.
///
/// Each `y_j` satisfies `y_j - x* = T_j(A)(y_0 - x*)` with `A = I - B/L` and
/// `T_j` the minimax polynomial on `[0, sigma]` normalized at 1.
pub fn chebyshev_run(
    b: &DMatrix<f64>,
    rhs: &DVector<f64>,
    l: f64,
    mu: f64,
    x0: &DVector<f64>,
    k: usize,
) -> Result<Vec<DVector<f64>>> {
    let sigma = 1.0 - mu / l;
    if !(sigma < 1.0) {
        return Err(OptimizerError::InvalidSpectrum(sigma));
    }
    let grad_step = |y: &DVector<f64>| y - (b * y - rhs) * (1.0 / l);
    let mut out = Vec::with_capacity(k + 1);
    out.push(x0.clone());
    if k == 0 {
        return Ok(out);
    }
    let t1 = (2.0 - sigma) / sigma;
    // y_1 = (2 z_0 - sigma y_0) / (2 - sigma)
    let z0 = grad_step(x0);
    let y1 = (z0 * 2.0 - x0 * sigma) / (2.0 - sigma);
    out.push(y1);
    // alpha_j = C_j(t(1)) under C_j(t) = 2 t C_{j-1}(t) - C_{j-2}(t).
    let mut alpha_prev2 = 1.0_f64;
    let mut alpha_prev = t1;
    for j in 2..=k {
        let alpha = 2.0 * t1 * alpha_prev - alpha_prev2;
        let y_prev = &out[j - 1];
        let z = grad_step(y_prev);
        let y = (z * 2.0 - y_prev * sigma) * (2.0 * alpha_prev / (sigma * alpha))
            - &out[j - 2] * (alpha_prev2 / alpha);
        out.push(y);
        alpha_prev2 = alpha_prev;
        alpha_prev = alpha;
    }
    Ok(out)
}

/// Dense polynomial in the monomial basis, evaluated by Horner's scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialCoeffs {
    pub coeffs: DVector<f64>,
}

impl PolynomialCoeffs {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self {
            coeffs: DVector::from_vec(coeffs),
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    /// Applies `p(A)` to a vector by Horner's scheme.
    pub fn eval_matrix(&self, a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(v.len());
        for &c in self.coeffs.iter().rev() {
            acc = a * acc + v * c;
        }
        acc
    }
}

/// Monomial coefficients of the momentum polynomial
/// `N_j(x) = x ((1 + beta_j) N_{j-1}(x) - beta_j N_{j-2}(x))` with
/// `N_0 = 1`, `N_1 = x`. Normalized at 1 for any beta sequence.
///
/// Degrees beyond ~50 are returned as-is but the monomial basis is badly
/// conditioned there; evaluation uses Horner's scheme.
pub fn nesterov_polynomial(k: usize, beta: &[f64]) -> PolynomialCoeffs {
    if k == 0 {
        return PolynomialCoeffs::new(vec![1.0]);
    }
    if k == 1 {
        return PolynomialCoeffs::new(vec![0.0, 1.0]);
    }
    let mut prev2 = vec![1.0];
    let mut prev = vec![0.0, 1.0];
    for j in 2..=k {
        let b = beta
            .get(j - 2)
            .copied()
            .unwrap_or_else(|| beta.last().copied().unwrap_or(0.0));
        let mut next = vec![0.0; j + 1];
        for (i, &c) in prev.iter().enumerate() {
            next[i + 1] += (1.0 + b) * c;
        }
        for (i, &c) in prev2.iter().enumerate() {
            next[i + 1] -= b * c;
        }
        prev2 = prev;
        prev = next;
    }
    PolynomialCoeffs::new(prev)
}

/// Evaluates `N_k(x)` by the scalar two-term recurrence, which is stable for
/// any degree (no monomial coefficients involved).
pub fn nesterov_polynomial_eval(k: usize, beta: &[f64], x: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut prev2 = 1.0;
    let mut prev = x;
    for j in 2..=k {
        let b = beta
            .get(j - 2)
            .copied()
            .unwrap_or_else(|| beta.last().copied().unwrap_or(0.0));
        let next = x * ((1.0 + b) * prev - b * prev2);
        prev2 = prev;
        prev = next;
    }
    prev
}
