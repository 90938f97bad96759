//! Closed-form rate expressions for extrapolated and baseline methods, the
//! regularized Chebyshev value S(k, alpha) via a discretized convex minimax,
//! model-based norm estimates for gradient iterates, and speedup curves.

use crate::objectives::ProblemSpec;
use crate::optimizers::PolynomialCoeffs;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("sigma = {0} outside [0, 1)")]
    SigmaOutOfRange(f64),
    #[error("lambda = {0} must be positive")]
    NonPositiveLambda(f64),
    #[error("invalid bound input: {0}")]
    InvalidInput(String),
    #[error("grid size {grid} too small for degree {k} (need >= 10k and >= 2)")]
    GridTooSmall { grid: usize, k: usize },
    #[error("minimax solver stalled with projected-gradient residual {residual:e}")]
    SolverStalled { residual: f64 },
}

pub type Result<T> = std::result::Result<T, BoundsError>;

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(BoundsError::SigmaOutOfRange(sigma));
    }
    Ok(())
}

/// `(1 - sqrt(1 - sigma)) / (1 + sqrt(1 - sigma))`; strictly below `sigma`
/// on (0, 1).
pub fn zeta(sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let s = (1.0 - sigma).sqrt();
    Ok((1.0 - s) / (1.0 + s))
}

/// Minimax value `2 z^k / (1 + z^{2k})` of degree-`k` polynomials normalized
/// at 1 on `[0, sigma]`, with `z = zeta(sigma)`.
pub fn cheby_rate(k: usize, sigma: f64) -> Result<f64> {
    let z = zeta(sigma)?;
    if k == 0 {
        return Ok(1.0);
    }
    let zk = z.powi(k as i32);
    Ok(2.0 * zk / (1.0 + zk * zk))
}

/// Worst-case error of exact (unregularized) extrapolation after `k` steps
/// of a linear fixed-point iteration: `kappa_ai * cheby_rate(k, sigma) * d0`,
/// where `kappa_ai` conditions the shifted iteration matrix.
pub fn ampe_bound(kappa_ai: f64, k: usize, sigma: f64, d0: f64) -> Result<f64> {
    if !(kappa_ai > 0.0 && d0 > 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "kappa = {kappa_ai}, d0 = {d0} must be positive"
        )));
    }
    Ok(kappa_ai * cheby_rate(k, sigma)? * d0)
}

/// Minimizer data for
/// `S(k, alpha) = min_{q(1)=1} max_{[0, sigma]} ((1-x) q(x))^2 + alpha ||q||^2`
/// where `||q||` is the Euclidean norm of the monomial coefficients.
#[derive(Debug, Clone)]
pub struct SkAlphaSolution {
    pub value: f64,
    /// Monomial coefficients of the optimal polynomial; `q(1) = 1` holds by
    /// construction of the solve, though evaluating it at 1 in the monomial
    /// basis loses accuracy at high degree.
    pub q: PolynomialCoeffs,
    pub grid_size: usize,
}

/// Chebyshev polynomials of `[0, sigma]` evaluated at `x`:
/// `phi_j(x) = C_j((2x - sigma)/sigma)`, all bounded by 1 on the interval.
fn cheb_row(k: usize, sigma: f64, x: f64) -> DVector<f64> {
    let t = if sigma > 0.0 {
        (2.0 * x - sigma) / sigma
    } else {
        x
    };
    let mut row = DVector::zeros(k + 1);
    row[0] = 1.0;
    if k >= 1 {
        row[1] = t;
    }
    for j in 2..=k {
        row[j] = 2.0 * t * row[j - 1] - row[j - 2];
    }
    row
}

/// Upper-triangular change of basis: column `j` holds the monomial
/// coefficients of `C_j((2x - sigma)/sigma)`.
fn cheb_to_monomial(k: usize, sigma: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(k + 1, k + 1);
    b[(0, 0)] = 1.0;
    if k == 0 {
        return b;
    }
    let scale = if sigma > 0.0 { 2.0 / sigma } else { 1.0 };
    let shift = if sigma > 0.0 { -1.0 } else { 0.0 };
    b[(0, 1)] = shift;
    b[(1, 1)] = scale;
    for j in 2..=k {
        for i in 0..=j {
            let mut v = 2.0 * shift * b[(i, j - 1)] - b[(i, j - 2)];
            if i >= 1 {
                v += 2.0 * scale * b[(i - 1, j - 1)];
            }
            b[(i, j)] = v;
        }
    }
    b
}

struct MinimaxProblem {
    /// Grid rows of basis values, one per grid point.
    phi: DMatrix<f64>,
    /// `1 - x_i` weights.
    w: DVector<f64>,
    grid: Vec<f64>,
    /// Penalty Gram matrix `alpha * B^T B` in the working basis.
    pen: DMatrix<f64>,
    /// Constraint row: basis values at `x = 1`.
    a: DVector<f64>,
}

impl MinimaxProblem {
    fn new(k: usize, sigma: f64, alpha: f64, grid: Vec<f64>) -> Self {
        let m = grid.len();
        let mut phi = DMatrix::zeros(m, k + 1);
        for i in 0..m {
            phi.row_mut(i)
                .copy_from(&cheb_row(k, sigma, grid[i]).transpose());
        }
        let w = DVector::from_fn(m, |i, _| 1.0 - grid[i]);
        let b = cheb_to_monomial(k, sigma);
        let pen = b.transpose() * &b * alpha;
        let a = cheb_row(k, sigma, 1.0);
        Self {
            phi,
            w,
            grid,
            pen,
            a,
        }
    }

    /// Pointwise `g_i = ((1 - x_i) p(x_i))^2` on the grid.
    fn point_values(&self, q: &DVector<f64>) -> DVector<f64> {
        let p = &self.phi * q;
        DVector::from_fn(p.len(), |i, _| {
            let r = self.w[i] * p[i];
            r * r
        })
    }

    fn penalty(&self, q: &DVector<f64>) -> f64 {
        (q.transpose() * &self.pen * q)[(0, 0)]
    }

    fn true_objective(&self, q: &DVector<f64>) -> f64 {
        self.point_values(q).max() + self.penalty(q)
    }

    fn softmax(&self, g: &DVector<f64>, rho: f64) -> (f64, DVector<f64>) {
        let gmax = g.max();
        let mut z = 0.0;
        let s = DVector::from_fn(g.len(), |i, _| {
            let e = ((g[i] - gmax) / rho).exp();
            z += e;
            e
        });
        (gmax + rho * z.ln(), s / z)
    }

    /// Smoothed objective `rho * logsumexp(g / rho) + penalty`; the
    /// smoothing gap above the true max is at most `rho * ln(grid)`.
    fn smoothed_value(&self, q: &DVector<f64>, rho: f64) -> f64 {
        self.softmax(&self.point_values(q), rho).0 + self.penalty(q)
    }

    /// Smoothed objective with gradient and Hessian.
    fn smoothed(&self, q: &DVector<f64>, rho: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
        let g = self.point_values(q);
        let (lse, s) = self.softmax(&g, rho);
        let value = lse + self.penalty(q);

        let p = &self.phi * q;
        // Row gradients: u_i = grad g_i = 2 w_i^2 p_i phi_i.
        let mut u = self.phi.clone();
        for i in 0..u.nrows() {
            u.row_mut(i).scale_mut(2.0 * self.w[i] * self.w[i] * p[i]);
        }
        let mean_u = u.tr_mul(&s);
        let grad = &mean_u + &self.pen * q * 2.0;

        // Curvature of g under the softmax plus the covariance term.
        let mut flat = self.phi.clone();
        for i in 0..flat.nrows() {
            flat.row_mut(i)
                .scale_mut(2.0 * self.w[i] * self.w[i] * s[i]);
        }
        let mut su = u.clone();
        for i in 0..su.nrows() {
            su.row_mut(i).scale_mut(s[i]);
        }
        let h = self.phi.tr_mul(&flat)
            + (u.tr_mul(&su) - &mean_u * mean_u.transpose()) / rho
            + &self.pen * 2.0;
        (value, grad, h)
    }

    /// Component of `grad` tangent to the constraint `a' q = 1`.
    fn projected(&self, grad: &DVector<f64>) -> DVector<f64> {
        grad - &self.a * (self.a.dot(grad) / self.a.dot(&self.a))
    }

    /// Constrained Newton with backtracking until progress stalls.
    fn newton(&self, q: &mut DVector<f64>, rho: f64) {
        let n = q.len();
        for _ in 0..100 {
            let (f0, grad, h) = self.smoothed(q, rho);
            let mut kkt = DMatrix::zeros(n + 1, n + 1);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            for i in 0..n {
                kkt[(i, n)] = self.a[i];
                kkt[(n, i)] = self.a[i];
            }
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            let dir = match kkt.lu().solve(&rhs) {
                Some(sol) => sol.rows(0, n).into_owned(),
                None => -self.projected(&grad),
            };
            let dir = if dir.dot(&grad) < 0.0 {
                dir
            } else {
                -self.projected(&grad)
            };
            let slope = dir.dot(&grad);
            let mut step = 1.0;
            let mut improved = false;
            for _ in 0..60 {
                let cand = &*q + &dir * step;
                let f1 = self.smoothed_value(&cand, rho);
                if f1 <= f0 + 1e-4 * step * slope {
                    *q = cand;
                    improved = f0 - f1 > 1e-13 * f0.abs().max(f64::MIN_POSITIVE);
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                return;
            }
        }
    }

    /// Continuation in the smoothing parameter down to a relative gap of
    /// 1e-9; errors out if shrinking `rho` stops helping.
    fn solve(&self, q: &mut DVector<f64>) -> Result<f64> {
        let m = self.grid.len() as f64;
        let mut rho = (self.point_values(q).max() * 0.5).max(f64::MIN_POSITIVE);
        for _ in 0..200 {
            self.newton(q, rho);
            let value = self.true_objective(q);
            if rho * m.ln() <= 1e-9 * value {
                return Ok(value);
            }
            rho = (rho / 8.0)
                .max(value * 1e-11 / m.ln())
                .max(f64::MIN_POSITIVE);
            if rho == f64::MIN_POSITIVE {
                // One last polish at the floor, then accept.
                self.newton(q, rho);
                return Ok(self.true_objective(q));
            }
        }
        let residual = self.projected(&self.smoothed(q, rho).1).norm();
        Err(BoundsError::SolverStalled { residual })
    }
}

fn uniform_grid(sigma: f64, m: usize) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0];
    }
    (0..m).map(|i| sigma * i as f64 / (m - 1) as f64).collect()
}

/// Max of `((1-x) q(x))^2` over a grid `fine`-times denser than `m` points.
fn certify_max(k: usize, sigma: f64, q: &DVector<f64>, m: usize, fine: usize) -> (f64, f64) {
    let grid = uniform_grid(sigma, (m - 1) * fine + 1);
    let mut best = (0.0_f64, 0.0_f64);
    for &x in &grid {
        let p = cheb_row(k, sigma, x).dot(q);
        let v = ((1.0 - x) * p).powi(2);
        if v >= best.0 {
            best = (v, x);
        }
    }
    best
}

/// Solves the regularized minimax `S(k, alpha)` on `[0, sigma]` by smoothing
/// the pointwise max on a grid and running constrained Newton, with one
/// refinement pass around the arg-max. The reported value re-evaluates the
/// minimizer on a 10x finer grid.
pub fn s_k_alpha(k: usize, sigma: f64, alpha: f64, grid_size: usize) -> Result<SkAlphaSolution> {
    check_sigma(sigma)?;
    if !(alpha >= 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "alpha = {alpha} negative"
        )));
    }
    if k > 30 {
        return Err(BoundsError::InvalidInput(format!(
            "degree k = {k} exceeds 30"
        )));
    }
    if grid_size < (10 * k).max(2) {
        return Err(BoundsError::GridTooSmall { grid: grid_size, k });
    }
    if k == 0 {
        // Single feasible polynomial q = 1; max of (1-x)^2 sits at x = 0.
        return Ok(SkAlphaSolution {
            value: 1.0 + alpha,
            q: PolynomialCoeffs::new(vec![1.0]),
            grid_size: 1,
        });
    }

    let mut grid = uniform_grid(sigma, grid_size);
    let spacing = if grid.len() > 1 {
        grid[1] - grid[0]
    } else {
        0.0
    };
    let b = cheb_to_monomial(k, sigma);

    // Two starts: the rescaled Chebyshev polynomial (optimal at alpha = 0)
    // and the minimum-penalty polynomial (optimal as alpha -> inf, uniform
    // monomial coefficients). Keep whichever scores better.
    let problem = MinimaxProblem::new(k, sigma, alpha, grid.clone());
    let mut q_cheb = DVector::zeros(k + 1);
    q_cheb[k] = 1.0 / problem.a[k];
    let uniform = DVector::from_element(k + 1, 1.0 / (k + 1) as f64);
    let q_flat = b
        .clone()
        .lu()
        .solve(&uniform)
        .unwrap_or_else(|| q_cheb.clone());
    let mut q = if problem.true_objective(&q_cheb) <= problem.true_objective(&q_flat) {
        q_cheb
    } else {
        q_flat
    };
    problem.solve(&mut q)?;

    // Refine once: densify around the certified arg-max and re-solve.
    let (_, xmax) = certify_max(k, sigma, &q, grid_size, 10);
    if spacing > 0.0 {
        for i in 1..=20 {
            let off = spacing * i as f64 / 10.0;
            for x in [xmax - off, xmax + off] {
                if (0.0..=sigma).contains(&x) {
                    grid.push(x);
                }
            }
        }
        let refined = MinimaxProblem::new(k, sigma, alpha, grid.clone());
        refined.solve(&mut q)?;
    }

    let (max_fine, _) = certify_max(k, sigma, &q, grid_size, 10);
    let monomial = &b * &q;
    let value = max_fine + alpha * monomial.norm_squared();
    Ok(SkAlphaSolution {
        value,
        q: PolynomialCoeffs { coeffs: monomial },
        grid_size: grid.len(),
    })
}

/// Norm estimates for a length-`k` window of short-step gradient iterates on
/// a smooth, strongly convex function with Hessian-Lipschitz constant `M`:
/// distances to the optimum, the difference matrix, and the deviation of the
/// true iterates from their linearized model around the optimum.
#[derive(Debug, Clone, Copy)]
pub struct ModelNorms {
    pub x_norm: f64,
    pub u_norm: f64,
    pub eps_norm: f64,
    pub e_norm: f64,
    pub p_norm: f64,
}

/// Closed-form `ModelNorms` with contraction `r = sqrt((L-mu)/(L+mu))`.
/// `p_norm` uses the submultiplicative estimate `2 U E + E^2`.
pub fn gradient_model_bounds(spec: &ProblemSpec, d0: f64, k: usize) -> Result<ModelNorms> {
    if !(d0 > 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "d0 = {d0} must be positive"
        )));
    }
    if spec.mu == 0.0 {
        return Err(BoundsError::InvalidInput(
            "model norms require mu > 0".into(),
        ));
    }
    let q = spec.mu / spec.l;
    let r = ((1.0 - q) / (1.0 + q)).sqrt();
    let kf = k as i32;
    let x_norm = if r < 1.0 {
        (1.0 - r.powi(kf)) / (1.0 - r) * d0
    } else {
        k as f64 * d0
    };
    let u_norm = (1.0 / q) * (1.0 - (1.0 - q).powi(kf)) * d0;
    let eps_norm = (1.0 + 1.0 / q).powi(2) * spec.m_hess / (2.0 * spec.l)
        * (0.5 - (1.0 - q).powi(kf) + 0.5 * ((1.0 - q) / (1.0 + q)).powi(kf))
        * d0
        * d0;
    let e_norm = 2.0 * eps_norm;
    let p_norm = 2.0 * u_norm * e_norm + e_norm * e_norm;
    Ok(ModelNorms {
        x_norm,
        u_norm,
        eps_norm,
        e_norm,
        p_norm,
    })
}

/// Inputs to the regularized extrapolation bound; absent norms fall back to
/// the gradient-model estimates for the same `spec`, `d0`, `k`.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    pub spec: ProblemSpec,
    pub d0: f64,
    pub k: usize,
    pub lambda: f64,
    pub norms: Option<ModelNorms>,
}

/// Worst-case error bound for regularized extrapolation over a window of
/// `k` steps:
/// `sqrt(kappa^2 + (1/lambda)(1 + P/lambda)^2 (Eps + kappa P / (2 sqrt(lambda)))^2)
///  * sqrt(S(k, lambda / d0^2)) * d0`.
pub fn rmpe_bound(inputs: &BoundInputs) -> Result<f64> {
    if !(inputs.lambda > 0.0) {
        return Err(BoundsError::NonPositiveLambda(inputs.lambda));
    }
    if !(inputs.d0 > 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "d0 = {} must be positive",
            inputs.d0
        )));
    }
    let norms = match inputs.norms {
        Some(n) => n,
        None => gradient_model_bounds(&inputs.spec, inputs.d0, inputs.k)?,
    };
    let kappa = inputs.spec.kappa;
    let lambda = inputs.lambda;
    let inner = norms.eps_norm + kappa * norms.p_norm / (2.0 * lambda.sqrt());
    let amp = (kappa * kappa
        + (1.0 / lambda) * (1.0 + norms.p_norm / lambda).powi(2) * inner * inner)
        .sqrt();
    let s = s_k_alpha(
        inputs.k,
        inputs.spec.sigma,
        lambda / (inputs.d0 * inputs.d0),
        1000,
    )?;
    Ok(amp * s.value.sqrt() * inputs.d0)
}

/// Prefactor `sqrt(1 + (1 + 1/beta)^2 / (4 beta^2))` relating the
/// small-`d0` limit of the regularized bound with `lambda = beta * P` to the
/// unregularized rate.
pub fn asymptotic_constant(beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "beta = {beta} must be positive"
        )));
    }
    let t = (1.0 + 1.0 / beta) / (2.0 * beta);
    Ok((1.0 + t * t).sqrt())
}

/// For each window order `k`: how many plain gradient steps reach the
/// extrapolation bound (with `lambda = p_norm`), divided by the `k` calls
/// the window consumed. Values above 1 mean acceleration per oracle call;
/// a bound at or above `d0` reports 0.
pub fn speedup_curve(
    spec: &ProblemSpec,
    d0: f64,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<(usize, f64)>> {
    let q = spec.mu / spec.l;
    let r = ((1.0 - q) / (1.0 + q)).sqrt();
    let mut out = Vec::new();
    for k in k_range {
        if k == 0 {
            out.push((0, 0.0));
            continue;
        }
        let norms = gradient_model_bounds(spec, d0, k)?;
        // p_norm = 0 (exactly linear model) still has a well-defined limit:
        // every perturbation term vanishes with it.
        let lambda = norms.p_norm.max(1e-300);
        let bound = rmpe_bound(&BoundInputs {
            spec: *spec,
            d0,
            k,
            lambda,
            norms: Some(norms),
        })?;
        let speedup = if bound >= d0 || !(bound > 0.0) {
            if bound == 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            ((bound / d0).ln() / r.ln()).ceil() / k as f64
        };
        out.push((k, speedup));
    }
    Ok(out)
}
