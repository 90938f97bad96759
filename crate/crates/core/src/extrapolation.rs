//! Minimal polynomial extrapolation of vector sequences.
//!
//! Given a window of iterates `x_0 .. x_{k+1}` produced by a fixed-point map,
//! the extrapolated point is the nonlinear average `sum_i c_i x_i` where the
//! weights `c` solve a (possibly regularized) constrained least-squares
//! problem on the matrix of consecutive differences. For a window generated
//! exactly by a convergent linear map, the average recovers the fixed point.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtrapolationError {
    #[error("iterate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("window holds {got} iterates, need at least {need}")]
    WindowTooShort { got: usize, need: usize },
    #[error(
        "rank-deficient system: pivot {pivot:e} at index {index} is below tolerance {tolerance:e}"
    )]
    RankDeficient {
        index: usize,
        pivot: f64,
        tolerance: f64,
    },
    #[error("degenerate system: coefficient normalizer 1'z = {sum:e} is too close to zero")]
    DegenerateSystem { sum: f64 },
    #[error("Cholesky breakdown while appending column {index}: squared pivot {value:e} is not positive; increase lambda")]
    NumericalBreakdown { index: usize, value: f64 },
    #[error("difference matrices have mismatched shapes")]
    ShapeMismatch,
    #[error("invalid regularization lambda = {0}; must be finite and non-negative")]
    InvalidLambda(f64),
    #[error("linear model rejected: 1 appears to be an eigenvalue of A")]
    UnitEigenvalue,
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, ExtrapolationError>;

/// Ring buffer of iterate vectors with fixed capacity `k + 2`.
///
/// Callers stream iterates one at a time; once full, pushing evicts the
/// oldest entry. All iterates must share the same dimension.
#[derive(Debug, Clone)]
pub struct IterateWindow {
    buf: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl IterateWindow {
    /// Window of order `k`, i.e. capacity `k + 2`.
    pub fn with_order(k: usize) -> Self {
        Self::with_capacity(k + 2)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity >= 2, "window capacity must be at least 2");
        Self {
            buf: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn from_iterates<I>(iterates: I) -> Result<Self>
    where
        I: IntoIterator<Item = DVector<f64>>,
    {
        let items: Vec<_> = iterates.into_iter().collect();
        if items.len() < 2 {
            return Err(ExtrapolationError::WindowTooShort {
                got: items.len(),
                need: 2,
            });
        }
        let mut w = Self::with_capacity(items.len());
        for x in items {
            w.push(x)?;
        }
        Ok(w)
    }

    /// Appends an iterate, evicting the oldest one when full.
    pub fn push(&mut self, x: DVector<f64>) -> Result<()> {
        if let Some(first) = self.buf.front() {
            if first.len() != x.len() {
                return Err(ExtrapolationError::DimensionMismatch {
                    expected: first.len(),
                    got: x.len(),
                });
            }
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(x);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dimension(&self) -> Option<usize> {
        self.buf.front().map(|v| v.len())
    }

    pub fn iterate(&self, i: usize) -> &DVector<f64> {
        &self.buf[i]
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.buf.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buf.iter()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Matrix of consecutive iterate increments, column `i` being `x_{i+1} - x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    columns: DMatrix<f64>,
}

impl DifferenceMatrix {
    pub fn from_matrix(columns: DMatrix<f64>) -> Self {
        Self { columns }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn ncols(&self) -> usize {
        self.columns.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.columns.nrows()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.columns.column(i).into_owned()
    }

    /// Gram matrix `U^T U`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.columns.tr_mul(&self.columns)
    }

    /// Spectral norm via SVD.
    pub fn spectral_norm(&self) -> f64 {
        self.columns
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }
}

/// Extrapolation weights together with the regularization they were solved at.
///
/// The entries always sum to one.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub c: DVector<f64>,
    pub lambda: f64,
}

impl Coefficients {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

pub fn build_difference_matrix(window: &IterateWindow) -> Result<DifferenceMatrix> {
    if window.len() < 2 {
        return Err(ExtrapolationError::WindowTooShort {
            got: window.len(),
            need: 2,
        });
    }
    let n = window.dimension().unwrap();
    let m = window.len() - 1;
    let mut columns = DMatrix::zeros(n, m);
    for i in 0..m {
        let d = window.iterate(i + 1) - window.iterate(i);
        columns.set_column(i, &d);
    }
    Ok(DifferenceMatrix { columns })
}

/// Default pivot tolerance for the unregularized solve:
/// `1e-12 * trace(U^T U) / (k + 1)`.
pub fn default_pivot_tolerance(gram_trace: f64, ncols: usize) -> f64 {
    1e-12 * gram_trace / ncols as f64
}

/// Weights minimizing `c^T (U^T U + lambda I) c` subject to `1^T c = 1`.
///
/// For `lambda > 0` this solves `(U^T U + lambda I) z = 1` by Cholesky and
/// normalizes `c = z / (1^T z)`. For `lambda = 0` the bordered KKT system of
/// the equality-constrained problem is solved directly, so that a singular
/// Gram matrix whose null space is transversal to the constraint (the exact
/// recovery case) still yields the unique minimizer; a pivot below tolerance
/// raises [`ExtrapolationError::RankDeficient`].
pub fn rmpe_coefficients(u: &DifferenceMatrix, lambda: f64) -> Result<Coefficients> {
    rmpe_coefficients_with_tol(u, lambda, None)
}

pub fn rmpe_coefficients_with_tol(
    u: &DifferenceMatrix,
    lambda: f64,
    pivot_tol: Option<f64>,
) -> Result<Coefficients> {
    let gram = u.gram();
    coefficients_from_gram(&gram, lambda, pivot_tol)
}

/// Same as [`rmpe_coefficients`] but reusing a precomputed Gram matrix, so a
/// ladder of lambda values can share the `O(n k^2)` product.
pub fn coefficients_from_gram(
    gram: &DMatrix<f64>,
    lambda: f64,
    pivot_tol: Option<f64>,
) -> Result<Coefficients> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ExtrapolationError::InvalidLambda(lambda));
    }
    let m = gram.ncols();
    if m == 0 {
        return Err(ExtrapolationError::WindowTooShort { got: 1, need: 2 });
    }
    let c = if lambda > 0.0 {
        let mut reg = gram.clone();
        for i in 0..m {
            reg[(i, i)] += lambda;
        }
        let factor = cholesky_lower(&reg, 0.0)?;
        let z = cholesky_solve(&factor, &DVector::from_element(m, 1.0));
        normalize(z)?
    } else {
        let tol = pivot_tol.unwrap_or_else(|| default_pivot_tolerance(gram.trace(), m));
        solve_bordered_kkt(gram, tol)?
    };
    Ok(Coefficients { c, lambda })
}

fn normalize(z: DVector<f64>) -> Result<DVector<f64>> {
    let s: f64 = z.sum();
    // 1'z = 1' M^{-1} 1 > 0 for positive definite M; checked defensively.
    if !s.is_finite() || s.abs() < f64::MIN_POSITIVE {
        return Err(ExtrapolationError::DegenerateSystem { sum: s });
    }
    Ok(z / s)
}

/// Solves `[2M 1; 1' 0] [c; nu] = [0; 1]` by LU with partial pivoting,
/// followed by two rounds of iterative refinement: the KKT system of a
/// squared Krylov matrix is consistently ill-conditioned and refinement
/// recovers most of the digits the factorization loses.
fn solve_bordered_kkt(gram: &DMatrix<f64>, pivot_tol: f64) -> Result<DVector<f64>> {
    let m = gram.ncols();
    let dim = m + 1;
    let mut kkt = DMatrix::zeros(dim, dim);
    for i in 0..m {
        for j in 0..m {
            kkt[(i, j)] = 2.0 * gram[(i, j)];
        }
        kkt[(i, m)] = 1.0;
        kkt[(m, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(dim);
    rhs[m] = 1.0;

    let mut sol = lu_solve(kkt.clone(), rhs.clone(), pivot_tol)?;
    for _ in 0..2 {
        let residual = &rhs - &kkt * &sol;
        let correction = lu_solve(kkt.clone(), residual, pivot_tol)?;
        sol += correction;
    }
    Ok(sol.rows(0, m).into_owned())
}

fn lu_solve(mut a: DMatrix<f64>, mut rhs: DVector<f64>, pivot_tol: f64) -> Result<DVector<f64>> {
    let dim = a.ncols();
    for col in 0..dim {
        let mut pivot_row = col;
        let mut pivot_val = a[(col, col)].abs();
        for r in (col + 1)..dim {
            if a[(r, col)].abs() > pivot_val {
                pivot_val = a[(r, col)].abs();
                pivot_row = r;
            }
        }
        if pivot_val < pivot_tol || pivot_val == 0.0 {
            return Err(ExtrapolationError::RankDeficient {
                index: col,
                pivot: pivot_val,
                tolerance: pivot_tol,
            });
        }
        if pivot_row != col {
            a.swap_rows(col, pivot_row);
            rhs.swap_rows(col, pivot_row);
        }
        for r in (col + 1)..dim {
            let f = a[(r, col)] / a[(col, col)];
            if f != 0.0 {
                for j in col..dim {
                    a[(r, j)] -= f * a[(col, j)];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut sol = DVector::zeros(dim);
    for i in (0..dim).rev() {
        let mut s = rhs[i];
        for j in (i + 1)..dim {
            s -= a[(i, j)] * sol[j];
        }
        sol[i] = s / a[(i, i)];
    }
    Ok(sol)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with the index and value of the first pivot at or below
/// `pivot_floor`.
pub(crate) fn cholesky_lower(m: &DMatrix<f64>, pivot_floor: f64) -> Result<DMatrix<f64>> {
    let n = m.ncols();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= pivot_floor || !d.is_finite() {
            return Err(ExtrapolationError::RankDeficient {
                index: j,
                pivot: d,
                tolerance: pivot_floor,
            });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

pub(crate) fn cholesky_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let y = forward_substitute(l, rhs);
    back_substitute_transposed(l, &y)
}

fn forward_substitute(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = l.ncols();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut s = rhs[i];
        for j in 0..i {
            s -= l[(i, j)] * y[j];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

fn back_substitute_transposed(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = l.ncols();
    let mut x = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for j in (i + 1)..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Incrementally maintained Cholesky factor of `U^T U + lambda I` over the
/// columns received so far.
#[derive(Debug, Clone)]
pub struct CholeskyState {
    factor: DMatrix<f64>,
    lambda: f64,
}

impl CholeskyState {
    pub fn empty(lambda: f64) -> Self {
        Self {
            factor: DMatrix::zeros(0, 0),
            lambda,
        }
    }

    pub fn order(&self) -> usize {
        self.factor.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `L L^T`, for consistency checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Solves `L L^T z = 1` and normalizes, yielding the current weights.
    pub fn coefficients(&self) -> Result<Coefficients> {
        let m = self.order();
        if m == 0 {
            return Err(ExtrapolationError::WindowTooShort { got: 1, need: 2 });
        }
        let z = cholesky_solve(&self.factor, &DVector::from_element(m, 1.0));
        Ok(Coefficients {
            c: normalize(z)?,
            lambda: self.lambda,
        })
    }
}

/// Grows the factor by one column: `a = L^{-1} U^T u_new` by a triangular
/// solve and the new diagonal entry is `sqrt(u_new'u_new + lambda - a'a)`.
/// Cost is `O(r n + r^2)` per append.
pub fn cholesky_append(
    state: &CholeskyState,
    u_so_far: &DifferenceMatrix,
    u_new: &DVector<f64>,
) -> Result<CholeskyState> {
    let r = state.order();
    if u_so_far.ncols() != r {
        return Err(ExtrapolationError::ShapeMismatch);
    }
    if r > 0 && u_so_far.nrows() != u_new.len() {
        return Err(ExtrapolationError::DimensionMismatch {
            expected: u_so_far.nrows(),
            got: u_new.len(),
        });
    }
    let a = if r > 0 {
        let rhs = u_so_far.matrix().tr_mul(u_new);
        forward_substitute(&state.factor, &rhs)
    } else {
        DVector::zeros(0)
    };
    let b_sq = u_new.dot(u_new) + state.lambda - a.dot(&a);
    if b_sq <= 0.0 || !b_sq.is_finite() {
        return Err(ExtrapolationError::NumericalBreakdown {
            index: r,
            value: b_sq,
        });
    }
    let mut factor = DMatrix::zeros(r + 1, r + 1);
    factor.view_mut((0, 0), (r, r)).copy_from(&state.factor);
    for j in 0..r {
        factor[(r, j)] = a[j];
    }
    factor[(r, r)] = b_sq.sqrt();
    Ok(CholeskyState {
        factor,
        lambda: state.lambda,
    })
}

/// Averages the first `k + 1` window entries with the given weights.
pub fn extrapolate_with(window: &IterateWindow, coeffs: &Coefficients) -> Result<DVector<f64>> {
    let m = coeffs.len();
    if window.len() < m + 1 {
        return Err(ExtrapolationError::WindowTooShort {
            got: window.len(),
            need: m + 1,
        });
    }
    let n = window.dimension().unwrap();
    let mut out = DVector::zeros(n);
    for i in 0..m {
        out.axpy(coeffs.c[i], window.iterate(i), 1.0);
    }
    Ok(out)
}

/// Extrapolated point `sum_{i=0}^{k} c_i x_i` for the window `x_0 .. x_{k+1}`.
pub fn extrapolate(window: &IterateWindow, lambda: f64) -> Result<DVector<f64>> {
    let u = build_difference_matrix(window)?;
    let coeffs = rmpe_coefficients(&u, lambda)?;
    extrapolate_with(window, &coeffs)
}

/// Exact first-order shift of the weights when `U` is perturbed to `U + E`:
/// `dc = -(I - M^{-1} 1 1^T / (1^T M^{-1} 1)) M^{-1} P c` with
/// `M = (U+E)^T (U+E) + lambda I` and `P = M - lambda I - U^T U`.
///
/// The shift satisfies `1^T dc = 0` and equals the difference between the
/// perturbed and unperturbed solutions exactly (the KKT systems are linear).
pub fn perturbation_shift(
    u: &DifferenceMatrix,
    e: &DifferenceMatrix,
    lambda: f64,
) -> Result<DVector<f64>> {
    if u.nrows() != e.nrows() || u.ncols() != e.ncols() {
        return Err(ExtrapolationError::ShapeMismatch);
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ExtrapolationError::InvalidLambda(lambda));
    }
    let m = u.ncols();
    let base = rmpe_coefficients(u, lambda)?;
    let tilde = DifferenceMatrix::from_matrix(u.matrix() + e.matrix());
    let p = tilde.gram() - u.gram();
    let mut big_m = tilde.gram();
    for i in 0..m {
        big_m[(i, i)] += lambda;
    }
    let tol = if lambda > 0.0 {
        0.0
    } else {
        default_pivot_tolerance(big_m.trace(), m)
    };
    let l = cholesky_lower(&big_m, tol)?;
    let pc = &p * &base.c;
    let v = cholesky_solve(&l, &pc);
    let w = cholesky_solve(&l, &DVector::from_element(m, 1.0));
    let ws: f64 = w.sum();
    if !ws.is_finite() || ws.abs() < f64::MIN_POSITIVE {
        return Err(ExtrapolationError::DegenerateSystem { sum: ws });
    }
    let vs: f64 = v.sum();
    Ok(-(v - w * (vs / ws)))
}

/// Linear fixed-point map `x -> A (x - x*) + x*`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    fixed_point: DVector<f64>,
}

impl LinearModel {
    /// Rejects non-square `A`, dimension mismatches and maps for which
    /// `(A - I) v` vanishes on a random probe vector.
    pub fn new(a: DMatrix<f64>, fixed_point: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(ExtrapolationError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        if a.nrows() != fixed_point.len() {
            return Err(ExtrapolationError::DimensionMismatch {
                expected: a.nrows(),
                got: fixed_point.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x1d_ea7e);
        let v = DVector::from_fn(a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let residual = (&a * &v - &v).norm();
        if residual <= f64::EPSILON * v.norm() {
            return Err(ExtrapolationError::UnitEigenvalue);
        }
        Ok(Self { a, fixed_point })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn fixed_point(&self) -> &DVector<f64> {
        &self.fixed_point
    }

    pub fn dimension(&self) -> usize {
        self.fixed_point.len()
    }

    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * (x - &self.fixed_point) + &self.fixed_point
    }

    /// `x_0, g(x_0), ..., g^{count-1}(x_0)`.
    pub fn iterates(&self, x0: &DVector<f64>, count: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut x = x0.clone();
        for _ in 0..count {
            out.push(x.clone());
            x = self.step(&x);
        }
        out
    }

    /// Condition number of `A - I`.
    pub fn shifted_condition(&self) -> f64 {
        let shifted = &self.a - DMatrix::identity(self.dimension(), self.dimension());
        let sv = shifted.svd(false, false).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}
