//! Dataset ingestion, reference-optimum computation, experiment
//! orchestration and CSV serialization for method comparisons.

use crate::adaptive::{run_accelerated, run_fixed_lambda, AdaptiveConfig, AdaptiveError};
use crate::objectives::{
    lipschitz_constants, logistic_hessian, logistic_value_grad, quadratic_value_grad,
    LogisticProblem, ProblemSpec, QuadraticForm, QuadraticProblem,
};
use crate::optimizers::{nesterov_step, NesterovState, StepperKind, StepperSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(
        "reference solve did not converge: gradient norm {grad_norm:e} after {calls} oracle calls"
    )]
    ReferenceNotConverged { calls: usize, grad_norm: f64 },
    #[error("objective setup failed: {0}")]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error("optimizer setup failed: {0}")]
    Optimizer(#[from] crate::optimizers::OptimizerError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("accelerated run failed: {0}")]
    Adaptive(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Row-sparse design matrix with `{-1, +1}` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Per-row `(zero-based index, value)` pairs, ascending in index.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub y: Vec<f64>,
    pub n_features: usize,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut z = DMatrix::zeros(self.rows.len(), self.n_features);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                z[(i, j)] = v;
            }
        }
        (z, DVector::from_vec(self.y.clone()))
    }
}

/// Reads `label idx:val idx:val ...` lines with 1-based, strictly ascending
/// indices. Labels `{0, 1}` map to `{-1, +1}`.
pub fn parse_libsvm(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut n_features = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue; // blank line
        };
        let label: f64 = label_tok.parse().map_err(|_| HarnessError::Parse {
            line: lineno,
            msg: format!("bad label {label_tok:?}"),
        })?;
        let label = match label {
            l if l == 1.0 => 1.0,
            l if l == -1.0 || l == 0.0 => -1.0,
            other => {
                return Err(HarnessError::Parse {
                    line: lineno,
                    msg: format!("label {other} not in {{0, 1, -1, +1}}"),
                })
            }
        };
        let mut row = Vec::new();
        let mut prev_idx = 0usize;
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| HarnessError::Parse {
                line: lineno,
                msg: format!("expected idx:val, got {tok:?}"),
            })?;
            let idx: usize = idx_s.parse().map_err(|_| HarnessError::Parse {
                line: lineno,
                msg: format!("bad feature index {idx_s:?}"),
            })?;
            let val: f64 = val_s.parse().map_err(|_| HarnessError::Parse {
                line: lineno,
                msg: format!("bad feature value {val_s:?}"),
            })?;
            if idx == 0 {
                return Err(HarnessError::Parse {
                    line: lineno,
                    msg: "feature indices are 1-based".into(),
                });
            }
            if idx <= prev_idx {
                return Err(HarnessError::Parse {
                    line: lineno,
                    msg: format!("index {idx} not ascending after {prev_idx}"),
                });
            }
            prev_idx = idx;
            n_features = n_features.max(idx);
            row.push((idx - 1, val));
        }
        rows.push(row);
        y.push(label);
    }
    if rows.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(Dataset {
        name: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        rows,
        y,
        n_features,
    })
}

/// Deterministic synthetic classification data: anisotropic Gaussian
/// features, a planted separator, and label flips with probability
/// `(1 - separability)/2`.
///
/// Feature scales are log-spaced across the columns so the design matrix is
/// ill-conditioned the way real tabular data is; an isotropic design makes
/// the downstream objective so well conditioned that every first-order
/// method converges immediately and benchmark runs say nothing.
pub fn synth_dataset(seed: u64, m: usize, n: usize, separability: f64) -> Result<Dataset> {
    if m == 0 || n == 0 {
        return Err(HarnessError::InvalidConfig(format!(
            "need m, n >= 1, got m = {m}, n = {n}"
        )));
    }
    let flip = ((1.0 - separability.clamp(0.0, 1.0)) / 2.0).clamp(0.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..n)
        .map(|j| {
            if n == 1 {
                1.0
            } else {
                10f64.powf(1.5 * j as f64 / (n - 1) as f64)
            }
        })
        .collect();
    let w_star: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rows = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let feats: Vec<f64> = (0..n)
            .map(|j| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scales[j]
            })
            .collect();
        let margin: f64 = feats.iter().zip(&w_star).map(|(a, b)| a * b).sum();
        let mut label = if margin >= 0.0 { 1.0 } else { -1.0 };
        if rng.gen::<f64>() < flip {
            label = -label;
        }
        rows.push(feats.iter().cloned().enumerate().collect());
        y.push(label);
    }
    Ok(Dataset {
        name: format!("synth-{seed}-{m}x{n}"),
        rows,
        y,
        n_features: n,
    })
}

/// One point of a convergence trace; `oracle_calls` counts gradient
/// evaluations of the method being traced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub oracle_calls: usize,
    pub f_gap: f64,
    pub dist: f64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace(pub Vec<TraceRecord>);

impl Deref for ConvergenceTrace {
    type Target = Vec<TraceRecord>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for ConvergenceTrace {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

/// High-precision minimizer used as the zero of every reported gap.
#[derive(Debug, Clone)]
pub struct Reference {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    pub grad_calls: usize,
}

const REFERENCE_CALL_CAP: usize = 10_000_000;

/// Momentum descent from the origin until
/// `||grad f|| <= tol * max(1, ||grad f(0)||)`; errors out after 1e7 calls.
pub fn reference_optimum<F>(
    value_grad: F,
    n: usize,
    spec: &ProblemSpec,
    tol: f64,
) -> Result<Reference>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let stepper = StepperSpec::new(StepperKind::NesterovStrong, spec.l, spec.mu)?;
    let x0 = DVector::zeros(n);
    let (_, g0) = value_grad(&x0);
    let threshold = tol * g0.norm().max(1.0);
    let mut state = NesterovState::new(x0);
    let mut calls = 1usize;
    loop {
        let (_, g) = value_grad(state.current());
        calls += 1;
        let g_norm = g.norm();
        if g_norm <= threshold {
            let (f_star, _) = value_grad(state.current());
            return Ok(Reference {
                x_star: state.current().clone(),
                f_star,
                grad_calls: calls,
            });
        }
        if calls >= REFERENCE_CALL_CAP {
            return Err(HarnessError::ReferenceNotConverged {
                calls,
                grad_norm: g_norm,
            });
        }
        state = nesterov_step(&state, |y| value_grad(y).1, &stepper)?;
        calls += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gradient,
    Nesterov,
    NesterovConvex,
    Rmpe(usize),
    Ampe(usize),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once([':', '(']) {
            Some((h, rest)) => (h, Some(rest.trim_end_matches(')'))),
            None => (s, None),
        };
        let k = |default: usize| -> Result<usize> {
            let k = match arg {
                Some(a) => a.parse().map_err(|_| {
                    HarnessError::InvalidConfig(format!("bad window order in {s:?}"))
                })?,
                None => default,
            };
            if !(1..=50).contains(&k) {
                return Err(HarnessError::InvalidConfig(format!(
                    "window order {k} outside [1, 50]"
                )));
            }
            Ok(k)
        };
        match head {
            "gradient" => Ok(Method::Gradient),
            "nesterov" => Ok(Method::Nesterov),
            "nesterov_convex" => Ok(Method::NesterovConvex),
            "rmpe" => Ok(Method::Rmpe(k(10)?)),
            "ampe" => Ok(Method::Ampe(k(10)?)),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown method {other:?}"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Gradient => "gradient".into(),
            Method::Nesterov => "nesterov".into(),
            Method::NesterovConvex => "nesterov_convex".into(),
            Method::Rmpe(k) => format!("rmpe:{k}"),
            Method::Ampe(k) => format!("ampe:{k}"),
        }
    }
}

/// Base stepper driven by the extrapolation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseStep {
    /// `1/L` short step.
    #[default]
    Short,
    /// `2/(L+mu)` fixed step.
    Fixed,
}

impl BaseStep {
    pub fn label(&self) -> &'static str {
        match self {
            BaseStep::Short => "1/L",
            BaseStep::Fixed => "2/(L+mu)",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ProblemChoice {
    Logistic { dataset: Dataset, tau: f64 },
    Quadratic { seed: u64, n: usize, cond: f64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ProblemChoice,
    pub methods: Vec<Method>,
    pub budget: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub base_step: BaseStep,
    pub lambda0: Option<f64>,
    pub lambda_min: Option<f64>,
    /// Record real wall-clock nanoseconds; off by default so identical runs
    /// produce identical CSV bytes.
    pub record_wall: bool,
}

#[derive(Debug, Clone)]
pub struct MethodTrace {
    pub method: String,
    pub trace: ConvergenceTrace,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub traces: Vec<MethodTrace>,
    pub reference: Reference,
    pub spec: ProblemSpec,
    pub csv: String,
}

/// SPD quadratic with eigenvalues log-spaced over `[1, cond]` under a
/// random orthogonal frame.
pub fn quadratic_by_condition(seed: u64, n: usize, cond: f64) -> Result<QuadraticProblem> {
    if n == 0 || !(cond >= 1.0) {
        return Err(HarnessError::InvalidConfig(format!(
            "need n >= 1 and cond >= 1, got n = {n}, cond = {cond}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let qr = g.qr();
    let q = qr.q();
    let eigs = DVector::from_fn(n, |i, _| {
        if n == 1 {
            1.0
        } else {
            cond.powf(i as f64 / (n - 1) as f64)
        }
    });
    let b_mat: DMatrix<f64> = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    let b_mat = (&b_mat + b_mat.transpose()) * 0.5;
    let b_vec = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    Ok(QuadraticProblem::new(b_mat, b_vec, QuadraticForm::Spd)?)
}

struct ProblemHandles {
    n: usize,
    spec: ProblemSpec,
    value_grad: Box<dyn Fn(&DVector<f64>) -> (f64, DVector<f64>)>,
    hessian: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
}

fn build_problem(choice: &ProblemChoice) -> Result<ProblemHandles> {
    match choice {
        ProblemChoice::Logistic { dataset, tau } => {
            let (z, y) = dataset.to_dense();
            let problem = std::rc::Rc::new(LogisticProblem::new(z, y, *tau)?);
            let spec = lipschitz_constants(&problem)?;
            let n = problem.dimension();
            let p2 = problem.clone();
            Ok(ProblemHandles {
                n,
                spec,
                value_grad: Box::new(move |w| logistic_value_grad(&problem, w)),
                hessian: Box::new(move |w| logistic_hessian(&p2, w)),
            })
        }
        ProblemChoice::Quadratic { seed, n, cond } => {
            let problem = quadratic_by_condition(*seed, *n, *cond)?;
            let spec = ProblemSpec::new(*cond, 1.0, 0.0)?;
            let n = *n;
            let b = problem.matrix().clone();
            Ok(ProblemHandles {
                n,
                spec,
                value_grad: Box::new(move |x| quadratic_value_grad(&problem, x)),
                hessian: Box::new(move |_| b.clone()),
            })
        }
    }
}

/// Damped Newton descent to the reference tolerance. Conditioning-agnostic,
/// so the reference costs tens of oracle calls where the momentum loop
/// would need millions on a badly scaled design.
fn newton_reference(
    value_grad: &dyn Fn(&DVector<f64>) -> (f64, DVector<f64>),
    hessian: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    n: usize,
    tol: f64,
) -> Result<Reference> {
    let mut x = DVector::zeros(n);
    let (mut f, mut g) = value_grad(&x);
    let threshold = tol * g.norm().max(1.0);
    let mut calls = 1usize;
    for _ in 0..200 {
        if g.norm() <= threshold {
            return Ok(Reference {
                x_star: x,
                f_star: f,
                grad_calls: calls,
            });
        }
        let h = hessian(&x);
        let dir = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or(HarnessError::ReferenceNotConverged {
                    calls,
                    grad_norm: g.norm(),
                })?,
        };
        let mut step = 1.0;
        loop {
            let cand = &x - &dir * step;
            let (fc, gc) = value_grad(&cand);
            calls += 1;
            // Near the optimum f saturates in floating point while the
            // gradient norm still contracts, so accept on either signal.
            if fc.is_finite() && (fc < f || gc.norm() <= 0.9 * g.norm()) {
                x = cand;
                f = fc;
                g = gc;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(HarnessError::ReferenceNotConverged {
                    calls,
                    grad_norm: g.norm(),
                });
            }
        }
    }
    if g.norm() <= threshold {
        Ok(Reference {
            x_star: x,
            f_star: f,
            grad_calls: calls,
        })
    } else {
        Err(HarnessError::ReferenceNotConverged {
            calls,
            grad_norm: g.norm(),
        })
    }
}

/// Runs every configured method to the same gradient budget, reporting gaps
/// against a freshly computed high-precision reference, and renders the CSV.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.budget == 0 {
        return Err(HarnessError::InvalidConfig(
            "budget must be positive".into(),
        ));
    }
    if cfg.methods.is_empty() {
        return Err(HarnessError::InvalidConfig("no methods selected".into()));
    }
    let handles = build_problem(&cfg.problem)?;
    let reference = newton_reference(&*handles.value_grad, &*handles.hessian, handles.n, 1e-13)?;
    let spec = handles.spec;
    let value_grad = handles.value_grad;
    let x_star = reference.x_star.clone();
    let f_star = reference.f_star;
    let measure = |x: &DVector<f64>| {
        let (f, _) = value_grad(x);
        (f - f_star, (x - &x_star).norm())
    };

    let x0 = DVector::zeros(handles.n);
    let mut traces = Vec::new();
    for method in &cfg.methods {
        let start = std::time::Instant::now();
        let (trace, diverged) = run_method(*method, cfg, &spec, &value_grad, &measure, &x0)?;
        let mut trace = trace;
        if cfg.record_wall {
            let wall = start.elapsed().as_nanos() as u64;
            for r in trace.iter_mut() {
                r.wall_ns = wall;
            }
        }
        traces.push(MethodTrace {
            method: method.label(),
            trace,
            diverged,
        });
    }

    let csv = render_csv(&traces, cfg.base_step);
    if let Some(path) = &cfg.out {
        std::fs::write(path, &csv)?;
    }
    Ok(ExperimentResult {
        traces,
        reference,
        spec,
        csv,
    })
}

fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    value_grad: &dyn Fn(&DVector<f64>) -> (f64, DVector<f64>),
    measure: &dyn Fn(&DVector<f64>) -> (f64, f64),
    x0: &DVector<f64>,
) -> Result<(ConvergenceTrace, bool)> {
    let budget = cfg.budget;
    let record = |trace: &mut ConvergenceTrace, calls: usize, x: &DVector<f64>| {
        let (f_gap, dist) = measure(x);
        trace.push(TraceRecord {
            oracle_calls: calls,
            f_gap,
            dist,
            wall_ns: 0,
        });
    };
    match method {
        Method::Gradient | Method::Nesterov | Method::NesterovConvex => {
            let mut trace = ConvergenceTrace::default();
            record(&mut trace, 0, x0);
            match method {
                Method::Gradient => {
                    let step = 2.0 / (spec.l + spec.mu);
                    let mut x = x0.clone();
                    for calls in 1..=budget {
                        let (_, g) = value_grad(&x);
                        x -= g * step;
                        if x.iter().any(|v| !v.is_finite()) {
                            return Ok((trace, true));
                        }
                        record(&mut trace, calls, &x);
                    }
                }
                Method::Nesterov | Method::NesterovConvex => {
                    let kind = if method == Method::Nesterov {
                        StepperKind::NesterovStrong
                    } else {
                        StepperKind::NesterovConvex
                    };
                    let stepper = StepperSpec::new(kind, spec.l, spec.mu)?;
                    let mut state = NesterovState::new(x0.clone());
                    for calls in 1..=budget {
                        state = nesterov_step(&state, |y| value_grad(y).1, &stepper)?;
                        if state.current().iter().any(|v| !v.is_finite()) {
                            return Ok((trace, true));
                        }
                        record(&mut trace, calls, state.current());
                    }
                }
                _ => unreachable!(),
            }
            Ok((trace, false))
        }
        Method::Rmpe(k) | Method::Ampe(k) => {
            let step = match cfg.base_step {
                BaseStep::Short => 1.0 / spec.l,
                BaseStep::Fixed => 2.0 / (spec.l + spec.mu),
            };
            let stepper = |x: &DVector<f64>| x - value_grad(x).1 * step;
            let mut acfg = AdaptiveConfig::new(k);
            acfg.lambda0 = cfg.lambda0;
            acfg.lambda_min = cfg.lambda_min;
            let run = match method {
                Method::Rmpe(_) => {
                    run_accelerated(stepper, x0, |x| value_grad(x).0, measure, &acfg, budget)
                }
                Method::Ampe(_) => run_fixed_lambda(stepper, x0, measure, &acfg, 0.0, budget),
                _ => unreachable!(),
            };
            match run {
                Ok(r) => Ok((r.trace, false)),
                Err(AdaptiveError::DivergedBaseMethod { partial, .. }) => Ok((partial.trace, true)),
                Err(other) => Err(HarnessError::Adaptive(other.to_string())),
            }
        }
    }
}

/// CSV with a metadata comment line, then `method,oracle_calls,f_gap,dist,wall_ns`
/// rows. Float formatting is shortest-roundtrip, so equal runs give equal bytes.
pub fn render_csv(traces: &[MethodTrace], base_step: BaseStep) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# base_step={}", base_step.label());
    out.push_str("method,oracle_calls,f_gap,dist,wall_ns\n");
    for mt in traces {
        for r in mt.trace.iter() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                mt.method, r.oracle_calls, r.f_gap, r.dist, r.wall_ns
            );
        }
    }
    out
}

/// Gnuplot script plotting `f_gap` against oracle calls for every method in
/// a CSV produced by [`render_csv`].
pub fn gnuplot_script(csv_path: &Path, methods: &[Method]) -> String {
    let mut out = String::new();
    out.push_str("set datafile separator ','\nset logscale y\n");
    out.push_str("set xlabel 'gradient oracle calls'\nset ylabel 'f - f*'\n");
    out.push_str("plot ");
    let path = csv_path.display();
    let plots: Vec<String> = methods
        .iter()
        .map(|m| {
            format!(
                "'{path}' using 2:($1 eq '{label}' ? $3 : 1/0) with lines title '{label}'",
                label = m.label()
            )
        })
        .collect();
    out.push_str(&plots.join(", \\\n     "));
    out.push('\n');
    out
}
