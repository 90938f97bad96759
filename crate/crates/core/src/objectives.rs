//! Objective/gradient oracles for the quadratic and l2-regularized logistic
//! problems, plus estimation of their smoothness constants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("matrix is not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),
    #[error("gradient at the computed minimizer has norm {0:e}, expected <= 1e-10")]
    NotAtMinimum(f64),
    #[error("design matrix must be nonzero")]
    ZeroDesignMatrix,
    #[error("penalty tau must be positive, got {0}")]
    InvalidPenalty(f64),
    #[error("labels must lie in {{-1, +1}}")]
    InvalidLabels,
    #[error("power iteration did not converge after {0} steps")]
    PowerIterationDiverged(usize),
    #[error("constants must satisfy 0 < mu <= L, got mu = {mu}, l = {l}")]
    InvalidConstants { mu: f64, l: f64 },
    #[error("matrix is singular")]
    Singular,
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Smoothness data of a problem: `L`, `mu`, the Hessian-Lipschitz constant,
/// the contraction factor `sigma = 1 - mu/L` of the short-step gradient map
/// and the condition number `kappa = L / mu`.
#[derive(Debug, Clone, Copy)]
pub struct ProblemSpec {
    pub l: f64,
    pub mu: f64,
    pub m_hess: f64,
    pub sigma: f64,
    pub kappa: f64,
}

impl ProblemSpec {
    pub fn new(l: f64, mu: f64, m_hess: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= l && l.is_finite()) {
            return Err(ObjectiveError::InvalidConstants { mu, l });
        }
        Ok(Self {
            l,
            mu,
            m_hess,
            sigma: 1.0 - mu / l,
            kappa: l / mu,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadraticForm {
    /// `f(x) = x'Bx/2 - b'x` with SPD `B`.
    Spd,
    /// `f(x) = ||Bx - b||^2 / 2`.
    LeastSquares,
}

/// Quadratic objective with a known minimizer `x* = B^{-1} b`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    b_mat: DMatrix<f64>,
    b_vec: DVector<f64>,
    form: QuadraticForm,
    x_star: DVector<f64>,
}

impl QuadraticProblem {
    pub fn new(b_mat: DMatrix<f64>, b_vec: DVector<f64>, form: QuadraticForm) -> Result<Self> {
        if form == QuadraticForm::Spd {
            let asym = (&b_mat - b_mat.transpose()).abs().max();
            if asym > 1e-12 * b_mat.norm().max(1.0) {
                return Err(ObjectiveError::NotSymmetric(asym));
            }
        }
        let x_star = b_mat
            .clone()
            .lu()
            .solve(&b_vec)
            .ok_or(ObjectiveError::Singular)?;
        let problem = Self {
            b_mat,
            b_vec,
            form,
            x_star,
        };
        let (_, g) = quadratic_value_grad(&problem, &problem.x_star);
        let scale = problem.b_vec.norm().max(1.0);
        if g.norm() > 1e-10 * scale.max(problem.b_mat.norm()) {
            return Err(ObjectiveError::NotAtMinimum(g.norm()));
        }
        Ok(problem)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b_mat
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b_vec
    }

    pub fn form(&self) -> QuadraticForm {
        self.form
    }

    pub fn minimizer(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn dimension(&self) -> usize {
        self.b_vec.len()
    }
}

pub fn quadratic_value_grad(problem: &QuadraticProblem, x: &DVector<f64>) -> (f64, DVector<f64>) {
    match problem.form {
        QuadraticForm::Spd => {
            let bx = &problem.b_mat * x;
            let value = 0.5 * x.dot(&bx) - problem.b_vec.dot(x);
            (value, bx - &problem.b_vec)
        }
        QuadraticForm::LeastSquares => {
            let r = &problem.b_mat * x - &problem.b_vec;
            (0.5 * r.norm_squared(), problem.b_mat.tr_mul(&r))
        }
    }
}

/// l2-regularized logistic regression over rows `z_i` with labels in
/// `{-1, +1}` and penalty `tau > 0`.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    z: DMatrix<f64>,
    y: DVector<f64>,
    tau: f64,
}

impl LogisticProblem {
    pub fn new(z: DMatrix<f64>, y: DVector<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(ObjectiveError::InvalidPenalty(tau));
        }
        if y.len() != z.nrows() || y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(ObjectiveError::InvalidLabels);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::ZeroDesignMatrix);
        }
        Ok(Self { z, y, tau })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dimension(&self) -> usize {
        self.z.ncols()
    }

    pub fn samples(&self) -> usize {
        self.z.nrows()
    }
}

/// `log(1 + exp(-m))` without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Standard sigmoid, saturating for large |t|.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logistic_value_grad(problem: &LogisticProblem, w: &DVector<f64>) -> (f64, DVector<f64>) {
    let margins = &problem.z * w;
    let mut value = 0.0;
    let mut weights = DVector::zeros(problem.samples());
    for i in 0..problem.samples() {
        let ym = problem.y[i] * margins[i];
        value += softplus_neg(ym);
        weights[i] = -problem.y[i] * sigmoid(-ym);
    }
    let mut grad = problem.z.tr_mul(&weights);
    value += 0.5 * problem.tau * w.norm_squared();
    grad.axpy(problem.tau, w, 1.0);
    (value, grad)
}

/// `Z^T diag(s (1 - s)) Z + tau I` at `w`, with `s` the per-sample sigmoid
/// of the signed margin.
pub fn logistic_hessian(problem: &LogisticProblem, w: &DVector<f64>) -> DMatrix<f64> {
    let margins = &problem.z * w;
    let mut weighted = problem.z.clone();
    for i in 0..problem.samples() {
        let s = sigmoid(problem.y[i] * margins[i]);
        let d = s * (1.0 - s);
        for j in 0..problem.dimension() {
            weighted[(i, j)] *= d;
        }
    }
    let mut h = problem.z.tr_mul(&weighted);
    for j in 0..problem.dimension() {
        h[(j, j)] += problem.tau;
    }
    h
}

/// Spectral norm of `Z` by power iteration on `Z^T Z` with a fixed seed,
/// relative tolerance 1e-8, at most 10^4 steps.
pub fn spectral_norm(z: &DMatrix<f64>, seed: u64) -> Result<f64> {
    if z.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(z.ncols(), |_, _| rng.gen_range(-1.0..1.0));
    v /= v.norm();
    let mut prev = 0.0_f64;
    const MAX_STEPS: usize = 10_000;
    for _ in 0..MAX_STEPS {
        let mut next = z.tr_mul(&(z * &v));
        let eig = next.norm();
        if eig == 0.0 {
            // Probe happened to lie in the null space; reseed.
            next = DVector::from_fn(z.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        }
        let scale = next_norm(&next);
        v = next / scale;
        if (eig - prev).abs() <= 1e-8 * eig.max(f64::MIN_POSITIVE) {
            return Ok(eig.sqrt());
        }
        prev = eig;
    }
    Err(ObjectiveError::PowerIterationDiverged(MAX_STEPS))
}

fn next_norm(v: &DVector<f64>) -> f64 {
    let n = v.norm();
    if n == 0.0 {
        1.0
    } else {
        n
    }
}

/// Third-derivative bound of the scalar logistic loss: max |s''(t)| = 1/(6*sqrt(3)).
pub const LOGISTIC_HESSIAN_CURVATURE: f64 = 0.09622504486493764; // 1 / (6 sqrt 3)

/// `L = ||Z||^2 / 4 + tau`, `mu = tau`, and a Hessian-Lipschitz upper bound
/// `M = ||Z||^3 / (6 sqrt 3)`.
pub fn lipschitz_constants(problem: &LogisticProblem) -> Result<ProblemSpec> {
    let norm = spectral_norm(problem.design(), 0x5eed)?;
    if norm == 0.0 {
        return Err(ObjectiveError::ZeroDesignMatrix);
    }
    let l = norm * norm / 4.0 + problem.tau;
    let m_hess = norm.powi(3) * LOGISTIC_HESSIAN_CURVATURE;
    ProblemSpec::new(l, problem.tau, m_hess)
}
