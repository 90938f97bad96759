//! Regularization search by dichotomy and the restart-every-k accelerated
//! driving loop around an arbitrary one-step base method.

use crate::extrapolation::{
    build_difference_matrix, extrapolate_with, rmpe_coefficients, Coefficients, DifferenceMatrix,
    IterateWindow,
};
use crate::harness::{ConvergenceTrace, TraceRecord};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("invalid adaptive config: {0}")]
    InvalidConfig(String),
    #[error("no regularization candidate produced a finite objective ({tried} tried)")]
    AllCandidatesInvalid { tried: usize },
    #[error("base method produced a non-finite iterate at oracle call {at}")]
    DivergedBaseMethod {
        at: usize,
        partial: Box<AcceleratedRun>,
    },
}

pub type Result<T> = std::result::Result<T, AdaptiveError>;

/// Settings for the regularization ladder and the outer loop.
///
/// `lambda0 = None` scales the starting point with the data:
/// `||U'U||_F / (k+1)` per cycle; `lambda_min = None` floors the ladder
/// twelve decades below `lambda0`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    pub lambda0: Option<f64>,
    pub lambda_min: Option<f64>,
    pub shrink: f64,
    pub k: usize,
    pub restart: bool,
}

impl AdaptiveConfig {
    pub fn new(k: usize) -> Self {
        Self {
            lambda0: None,
            lambda_min: None,
            shrink: 0.5,
            k,
            restart: true,
        }
    }

    pub fn with_lambdas(k: usize, lambda0: f64, lambda_min: f64) -> Result<Self> {
        let cfg = Self {
            lambda0: Some(lambda0),
            lambda_min: Some(lambda_min),
            ..Self::new(k)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(AdaptiveError::InvalidConfig(format!(
                "shrink = {} outside (0, 1)",
                self.shrink
            )));
        }
        if let Some(l0) = self.lambda0 {
            if !(l0 > 0.0 && l0.is_finite()) {
                return Err(AdaptiveError::InvalidConfig(format!("lambda0 = {l0}")));
            }
        }
        if let Some(lm) = self.lambda_min {
            if !(lm > 0.0 && lm.is_finite()) {
                return Err(AdaptiveError::InvalidConfig(format!("lambda_min = {lm}")));
            }
        }
        if let (Some(l0), Some(lm)) = (self.lambda0, self.lambda_min) {
            if lm > l0 {
                return Err(AdaptiveError::InvalidConfig(format!(
                    "lambda_min = {lm} exceeds lambda0 = {l0}"
                )));
            }
        }
        if self.k == 0 {
            return Err(AdaptiveError::InvalidConfig("window order k = 0".into()));
        }
        Ok(())
    }

    /// Concrete ladder endpoints for a window's Gram matrix.
    fn ladder(&self, gram_fro: f64) -> (f64, f64) {
        let lambda0 = self
            .lambda0
            .unwrap_or_else(|| if gram_fro > 0.0 { gram_fro } else { 1.0 });
        let lambda_min = self.lambda_min.unwrap_or(1e-12 * lambda0);
        (lambda0, lambda_min.min(lambda0))
    }
}

/// Winning candidate of one dichotomy search.
#[derive(Debug, Clone)]
pub struct LambdaSearchResult {
    pub coefficients: Coefficients,
    pub point: DVector<f64>,
    pub f_value: f64,
    pub lambda: f64,
    /// Objective evaluations consumed by the search itself.
    pub f_calls: usize,
}

/// Walks `lambda0, lambda0*shrink, ...` down to `lambda_min`, evaluating the
/// extrapolated point's objective at each rung, and returns the best
/// candidate seen. The walk stops early as soon as a rung scores worse than
/// the one before it (or fails to produce a finite value). Only zeroth-order
/// objective access is used.
pub fn adaptive_lambda<F>(
    window: &IterateWindow,
    mut f_oracle: F,
    cfg: &AdaptiveConfig,
) -> Result<LambdaSearchResult>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    cfg.validate()?;
    let cols = window.len().saturating_sub(1);
    if cols == 0 {
        return Err(AdaptiveError::InvalidConfig(
            "window holds fewer than two iterates".into(),
        ));
    }
    let u =
        build_difference_matrix(window).map_err(|e| AdaptiveError::InvalidConfig(e.to_string()))?;
    let gram_fro = u.gram().norm() / cols as f64;
    let (lambda0, lambda_min) = cfg.ladder(gram_fro);

    let mut best: Option<LambdaSearchResult> = None;
    let mut prev_f = f64::INFINITY;
    let mut f_calls = 0usize;
    let mut tried = 0usize;
    let mut lambda = lambda0;
    while lambda >= lambda_min {
        tried += 1;
        let candidate = rmpe_coefficients(&u, lambda)
            .and_then(|c| extrapolate_with(window, &c).map(|x| (c, x)));
        let Ok((coefficients, point)) = candidate else {
            break;
        };
        let f_value = f_oracle(&point);
        f_calls += 1;
        if !f_value.is_finite() {
            break;
        }
        let better_than_best = best.as_ref().map_or(true, |b| f_value < b.f_value);
        if better_than_best {
            best = Some(LambdaSearchResult {
                coefficients,
                point,
                f_value,
                lambda,
                f_calls,
            });
        }
        if f_value > prev_f {
            break;
        }
        prev_f = f_value;
        lambda *= cfg.shrink;
    }
    match best {
        Some(mut b) => {
            b.f_calls = f_calls;
            Ok(b)
        }
        None => Err(AdaptiveError::AllCandidatesInvalid { tried }),
    }
}

/// Full record of one accelerated run.
#[derive(Debug, Clone, Default)]
pub struct AcceleratedRun {
    pub trace: ConvergenceTrace,
    /// Regularization accepted per outer cycle; cycles that fell back to the
    /// raw iterate contribute nothing here.
    pub chosen_lambdas: Vec<f64>,
    pub f_calls_per_cycle: Vec<usize>,
    pub stepper_calls_per_cycle: Vec<usize>,
}

/// Runs `stepper` in cycles of `k+1` calls, extrapolating from each full
/// window. The extrapolated point only replaces the running iterate when its
/// objective does not exceed the last raw iterate's (one extra objective
/// call per cycle), so cycle boundaries never regress for a monotone base
/// method. `measure` maps a point to the `(f_gap, dist)` pair recorded in
/// the trace and is free: it does not count against any oracle budget.
pub fn run_accelerated<S, F, M>(
    mut stepper: S,
    x0: &DVector<f64>,
    mut f_oracle: F,
    mut measure: M,
    cfg: &AdaptiveConfig,
    budget: usize,
) -> Result<AcceleratedRun>
where
    S: FnMut(&DVector<f64>) -> DVector<f64>,
    F: FnMut(&DVector<f64>) -> f64,
    M: FnMut(&DVector<f64>) -> (f64, f64),
{
    cfg.validate()?;
    run_cycles(
        &mut stepper,
        x0,
        &mut measure,
        cfg,
        budget,
        |window, run, x_last| {
            let search = adaptive_lambda(window, &mut f_oracle, cfg);
            let f_last = f_oracle(x_last);
            match search {
                Ok(res) => {
                    run.f_calls_per_cycle.push(res.f_calls + 1);
                    if res.f_value <= f_last {
                        run.chosen_lambdas.push(res.lambda);
                        Some(res.point)
                    } else {
                        None
                    }
                }
                Err(AdaptiveError::AllCandidatesInvalid { tried }) => {
                    // Count the candidates' calls plus the safeguard call.
                    run.f_calls_per_cycle.push(tried.saturating_sub(1) + 1);
                    None
                }
                Err(_) => None,
            }
        },
    )
}

/// Like [`run_accelerated`] but with the regularization pinned (0 selects
/// the exact constrained solve) and no objective-based safeguard: every full
/// window is extrapolated and accepted unconditionally, so instability of
/// the unregularized solve propagates into the run. Solver failures fall
/// back to the raw iterate and the run continues.
pub fn run_fixed_lambda<S, M>(
    mut stepper: S,
    x0: &DVector<f64>,
    mut measure: M,
    cfg: &AdaptiveConfig,
    lambda: f64,
    budget: usize,
) -> Result<AcceleratedRun>
where
    S: FnMut(&DVector<f64>) -> DVector<f64>,
    M: FnMut(&DVector<f64>) -> (f64, f64),
{
    cfg.validate()?;
    run_cycles(
        &mut stepper,
        x0,
        &mut measure,
        cfg,
        budget,
        |window, run, _x_last| {
            run.f_calls_per_cycle.push(0);
            let Ok(u) = build_difference_matrix(window) else {
                return None;
            };
            // On rank deficiency, retry with the longest leading block of
            // difference columns whose pivots pass. Truncating instead of
            // regularizing keeps the fixed-lambda path honest: a block that
            // barely clears the pivot tolerance can still be so badly
            // conditioned that the combined point is far worse than the last
            // iterate, and this run intentionally accepts it anyway.
            for cols in (1..=u.ncols()).rev() {
                let block = if cols == u.ncols() {
                    rmpe_coefficients(&u, lambda)
                } else {
                    let sub =
                        DifferenceMatrix::from_matrix(u.matrix().columns(0, cols).into_owned());
                    rmpe_coefficients(&sub, lambda)
                };
                let Ok(c) = block else { continue };
                if let Ok(point) = extrapolate_with(window, &c) {
                    if point.iter().all(|v| v.is_finite()) {
                        run.chosen_lambdas.push(lambda);
                        return Some(point);
                    }
                }
            }
            None
        },
    )
}

fn run_cycles<S, M, C>(
    stepper: &mut S,
    x0: &DVector<f64>,
    measure: &mut M,
    cfg: &AdaptiveConfig,
    budget: usize,
    mut choose: C,
) -> Result<AcceleratedRun>
where
    S: FnMut(&DVector<f64>) -> DVector<f64>,
    M: FnMut(&DVector<f64>) -> (f64, f64),
    C: FnMut(&IterateWindow, &mut AcceleratedRun, &DVector<f64>) -> Option<DVector<f64>>,
{
    let mut run = AcceleratedRun::default();
    let (gap0, dist0) = measure(x0);
    run.trace.push(TraceRecord {
        oracle_calls: 0,
        f_gap: gap0,
        dist: dist0,
        wall_ns: 0,
    });
    let mut x = x0.clone();
    let mut calls = 0usize;
    while calls < budget {
        let mut window = IterateWindow::with_order(cfg.k);
        window
            .push(x.clone())
            .map_err(|e| AdaptiveError::InvalidConfig(e.to_string()))?;
        let mut cycle_steps = 0usize;
        while cycle_steps < cfg.k + 1 && calls < budget {
            let next = stepper(&x);
            calls += 1;
            cycle_steps += 1;
            if next.iter().any(|v| !v.is_finite()) {
                run.stepper_calls_per_cycle.push(cycle_steps);
                return Err(AdaptiveError::DivergedBaseMethod {
                    at: calls,
                    partial: Box::new(run),
                });
            }
            let (gap, dist) = measure(&next);
            run.trace.push(TraceRecord {
                oracle_calls: calls,
                f_gap: gap,
                dist,
                wall_ns: 0,
            });
            window
                .push(next.clone())
                .map_err(|e| AdaptiveError::InvalidConfig(e.to_string()))?;
            x = next;
        }
        run.stepper_calls_per_cycle.push(cycle_steps);
        if cycle_steps == cfg.k + 1 {
            if let Some(point) = choose(&window, &mut run, &x) {
                let (gap, dist) = measure(&point);
                run.trace.push(TraceRecord {
                    oracle_calls: calls,
                    f_gap: gap,
                    dist,
                    wall_ns: 0,
                });
                if cfg.restart {
                    x = point;
                }
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extrapolation::LinearModel;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_window(model: &LinearModel, x0: &DVector<f64>, len: usize) -> IterateWindow {
        let mut w = IterateWindow::with_order(len.saturating_sub(2));
        for x in model.iterates(x0, len) {
            w.push(x).unwrap();
        }
        w
    }

    fn ladder_eval(window: &IterateWindow, lam: f64) -> DVector<f64> {
        let u = build_difference_matrix(window).unwrap();
        let c = rmpe_coefficients(&u, lam).unwrap();
        extrapolate_with(window, &c).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize) -> LinearModel {
        loop {
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let sym = (&g + g.transpose()) * 0.5;
            let norm = sym.norm();
            let a = sym * (0.85 / norm);
            let fp = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            if let Ok(m) = LinearModel::new(a, fp) {
                return m;
            }
        }
    }

    #[test]
    fn config_rejects_inverted_ladder() {
        assert!(AdaptiveConfig::with_lambdas(3, 1e-8, 1e-2).is_err());
        assert!(AdaptiveConfig::with_lambdas(3, 1e-2, 1e-8).is_ok());
    }

    #[test]
    fn config_rejects_bad_shrink() {
        let mut cfg = AdaptiveConfig::new(3);
        cfg.shrink = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn search_descends_to_floor_on_clean_linear_data() {
        // Exact linear iterates: smaller lambda always extrapolates closer
        // to the fixed point, so the search should ride the ladder down.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, 4);
        let x0 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let window = linear_window(&model, &x0, 6);
        let target = model.fixed_point().clone();
        let cfg = AdaptiveConfig::with_lambdas(4, 1e-2, 1e-10).unwrap();

        // Oracle: replay the ladder exhaustively with the same stop rule.
        let mut expected_best: Option<(f64, f64)> = None;
        let mut prev = f64::INFINITY;
        let mut lam = 1e-2;
        while lam >= 1e-10 {
            let f = (ladder_eval(&window, lam) - &target).norm_squared();
            if expected_best.map_or(true, |(bf, _)| f < bf) {
                expected_best = Some((f, lam));
            }
            if f > prev {
                break;
            }
            prev = f;
            lam *= 0.5;
        }
        let (exp_f, exp_lambda) = expected_best.unwrap();

        let res = adaptive_lambda(&window, |x| (x - &target).norm_squared(), &cfg).unwrap();
        assert_eq!(res.lambda, exp_lambda);
        assert_eq!(res.f_value, exp_f);
        // Clean data: the winner sits at (or next to) the ladder floor.
        assert!(res.lambda <= 1e-2 * 0.5f64.powi(20));
    }

    #[test]
    fn search_stops_after_two_calls_when_first_halving_regresses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 3);
        let x0 = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let window = linear_window(&model, &x0, 5);
        let cfg = AdaptiveConfig::with_lambdas(3, 1.0, 1e-12).unwrap();
        // Objective crafted to prefer the first rung: distance to its own
        // extrapolation.
        let target = ladder_eval(&window, 1.0);
        let mut calls = 0usize;
        let res = adaptive_lambda(
            &window,
            |x| {
                calls += 1;
                (x - &target).norm_squared()
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(res.lambda, 1.0);
        assert_eq!(res.f_calls, 2);
    }

    #[test]
    fn search_reports_all_candidates_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = random_model(&mut rng, 3);
        let x0 = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let window = linear_window(&model, &x0, 5);
        let cfg = AdaptiveConfig::with_lambdas(3, 1.0, 1e-4).unwrap();
        let err = adaptive_lambda(&window, |_| f64::NAN, &cfg).unwrap_err();
        assert!(matches!(
            err,
            AdaptiveError::AllCandidatesInvalid { tried: 1 }
        ));
    }

    #[test]
    fn zero_budget_records_only_the_start() {
        let cfg = AdaptiveConfig::new(2);
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let run = run_accelerated(
            |x: &DVector<f64>| x.clone(),
            &x0,
            |_| 0.0,
            |_| (0.0, 0.0),
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.trace[0].oracle_calls, 0);
        assert!(run.chosen_lambdas.is_empty());
    }

    #[test]
    fn first_cycle_recovers_linear_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 5;
        let model = random_model(&mut rng, n);
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let target = model.fixed_point().clone();
        let f = |x: &DVector<f64>| (x - &target).norm_squared();
        let cfg = AdaptiveConfig::new(n);
        let run = run_accelerated(
            |x: &DVector<f64>| model.step(x),
            &x0,
            f,
            |x| (f(x), (x - &target).norm()),
            &cfg,
            n + 1,
        )
        .unwrap();
        let last = run.trace.last().unwrap();
        let d0 = (&x0 - &target).norm();
        assert!(
            last.dist <= 1e-6 * d0,
            "dist = {:e} vs d0 = {:e}",
            last.dist,
            d0
        );
        assert_eq!(run.stepper_calls_per_cycle, vec![n + 1]);
    }

    #[test]
    fn oracle_accounting_per_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 4;
        let model = random_model(&mut rng, n);
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let target = model.fixed_point().clone();
        let k = 3;
        let cfg = AdaptiveConfig::new(k);
        let mut f_calls = 0usize;
        let run = run_accelerated(
            |x: &DVector<f64>| model.step(x),
            &x0,
            |x: &DVector<f64>| {
                f_calls += 1;
                (x - &target).norm_squared()
            },
            |_| (0.0, 0.0),
            &cfg,
            3 * (k + 1),
        )
        .unwrap();
        assert_eq!(run.stepper_calls_per_cycle, vec![k + 1; 3]);
        assert_eq!(run.f_calls_per_cycle.iter().sum::<usize>(), f_calls);
        // Ladder depth is at most 41 rungs (12 decades of halving) so each
        // cycle's search spends at most rungs + 1 objective calls.
        for &c in &run.f_calls_per_cycle {
            assert!(c <= 42, "cycle spent {c} objective calls");
        }
    }

    #[test]
    fn safeguard_keeps_raw_iterate_when_extrapolation_regresses() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 4;
        let model = random_model(&mut rng, n);
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let k = 2;
        let cfg = AdaptiveConfig::new(k);
        // Objective minimized exactly at the cycle's last raw iterate, so
        // every extrapolation candidate loses the comparison.
        let last_raw = model.iterates(&x0, k + 2).pop().unwrap();
        let run = run_accelerated(
            |x: &DVector<f64>| model.step(x),
            &x0,
            |x: &DVector<f64>| (x - &last_raw).norm_squared(),
            |x| ((x - &last_raw).norm_squared(), 0.0),
            &cfg,
            k + 1,
        )
        .unwrap();
        assert!(run.chosen_lambdas.is_empty());
        assert_eq!(run.trace.last().unwrap().f_gap, 0.0);
    }

    #[test]
    fn diverging_stepper_surfaces_partial_trace() {
        let cfg = AdaptiveConfig::new(2);
        let x0 = DVector::from_vec(vec![1.0]);
        let mut n = 0;
        let err = run_accelerated(
            |x: &DVector<f64>| {
                n += 1;
                if n >= 2 {
                    DVector::from_vec(vec![f64::NAN])
                } else {
                    x * 2.0
                }
            },
            &x0,
            |_| 0.0,
            |_| (0.0, 0.0),
            &cfg,
            10,
        )
        .unwrap_err();
        match err {
            AdaptiveError::DivergedBaseMethod { at, partial } => {
                assert_eq!(at, 2);
                assert_eq!(partial.trace.len(), 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fixed_lambda_survives_degenerate_windows() {
        // Stepper already at its fixed point: all difference columns are
        // zero. The run must finish without diverging; any extrapolation
        // accepted can only be the fixed point itself, so every trace record
        // keeps a zero gap.
        let cfg = AdaptiveConfig::new(2);
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let run = run_fixed_lambda(
            |x: &DVector<f64>| x.clone(),
            &x0,
            |_| (0.0, 0.0),
            &cfg,
            0.0,
            6,
        )
        .unwrap();
        assert!(run.trace.len() >= 7);
        assert!(run.trace.iter().all(|r| r.f_gap == 0.0));
    }
}
