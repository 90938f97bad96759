use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqaccel::bounds::{gradient_model_bounds, rmpe_bound, speedup_curve, BoundInputs};
use seqaccel::extrapolation::{
    build_difference_matrix, extrapolate_with, rmpe_coefficients, CholeskyState, IterateWindow,
    LinearModel,
};
use seqaccel::harness::{
    parse_libsvm, run_experiment, synth_dataset, BaseStep, ExperimentConfig, HarnessError, Method,
    ProblemChoice,
};
use seqaccel::objectives::ProblemSpec;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "seqaccel",
    about = "Sequence-acceleration benchmarks and bound curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run optimization methods on a problem and write a convergence CSV.
    Run(RunArgs),
    /// Evaluate worst-case bound or speedup curves over the window order.
    Bounds(BoundsArgs),
    /// Exercise the library's core numerical identities.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// libsvm-format dataset file (mutually exclusive with --synth).
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Synthetic dataset as m,n,seed.
    #[arg(long, value_name = "M,N,SEED")]
    synth: Option<String>,
    /// Ridge penalty of the logistic objective.
    #[arg(long, default_value_t = 1e-4)]
    tau: f64,
    /// Comma-separated methods: gradient, nesterov, nesterov_convex,
    /// rmpe[:K], ampe[:K].
    #[arg(long, default_value = "gradient,nesterov,rmpe:10")]
    methods: String,
    /// Default window order for rmpe/ampe entries without an explicit one.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Gradient-oracle calls granted to every method.
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base stepper for the extrapolation arms.
    #[arg(long, value_parser = ["short", "fixed"], default_value = "short")]
    base_step: String,
    /// Label-noise control of the synthetic data, in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    separability: f64,
    /// Also write a gnuplot script next to --out.
    #[arg(long)]
    gnuplot: bool,
    /// Record real wall-clock times (breaks byte-for-byte reproducibility).
    #[arg(long)]
    wall: bool,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, default_value_t = 100.0)]
    l: f64,
    #[arg(long, default_value_t = 10.0)]
    mu: f64,
    /// Hessian-Lipschitz constant of the model.
    #[arg(long, default_value_t = 0.1)]
    m_hess: f64,
    #[arg(long, default_value_t = 1e-4)]
    d0: f64,
    /// Largest window order to evaluate.
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    /// Which curve to emit: worst-case error bound or per-call speedup.
    #[arg(long, value_parser = ["bound", "speedup"], default_value = "speedup")]
    curve: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn parse(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Parse { .. }
            | HarnessError::EmptyDataset
            | HarnessError::Io(_)
            | HarnessError::InvalidConfig(_) => 2,
            HarnessError::ReferenceNotConverged { .. } => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let dataset = match (&args.data, &args.synth) {
        (Some(path), None) => parse_libsvm(path)?,
        (None, Some(spec)) => {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::parse(format!(
                    "--synth expects m,n,seed, got {spec:?}"
                )));
            }
            let m = parts[0]
                .trim()
                .parse()
                .map_err(|_| CliError::parse("bad m"))?;
            let n = parts[1]
                .trim()
                .parse()
                .map_err(|_| CliError::parse("bad n"))?;
            let seed = parts[2]
                .trim()
                .parse()
                .map_err(|_| CliError::parse("bad seed"))?;
            synth_dataset(seed, m, n, args.separability)?
        }
        _ => {
            return Err(CliError::parse(
                "exactly one of --data or --synth is required",
            ))
        }
    };
    let mut methods = Vec::new();
    for tok in args.methods.split(',') {
        let method = Method::parse(tok)?;
        let method = match method {
            Method::Rmpe(10) if !tok.contains(':') && !tok.contains('(') => Method::Rmpe(args.k),
            Method::Ampe(10) if !tok.contains(':') && !tok.contains('(') => Method::Ampe(args.k),
            m => m,
        };
        methods.push(method);
    }
    let cfg = ExperimentConfig {
        problem: ProblemChoice::Logistic {
            dataset,
            tau: args.tau,
        },
        methods: methods.clone(),
        budget: args.budget,
        seed: args.seed,
        out: args.out.clone(),
        base_step: if args.base_step == "fixed" {
            BaseStep::Fixed
        } else {
            BaseStep::Short
        },
        lambda0: args.lambda0,
        lambda_min: args.lambda_min,
        record_wall: args.wall,
    };
    let result = run_experiment(&cfg)?;
    match &args.out {
        Some(path) => {
            eprintln!(
                "wrote {} ({} methods, reference solved in {} gradient calls)",
                path.display(),
                result.traces.len(),
                result.reference.grad_calls
            );
            if args.gnuplot {
                let script = seqaccel::harness::gnuplot_script(path, &methods);
                let gp = path.with_extension("gp");
                std::fs::write(&gp, script)
                    .map_err(|e| CliError::parse(format!("writing {}: {e}", gp.display())))?;
                eprintln!("wrote {}", gp.display());
            }
        }
        None => print!("{}", result.csv),
    }
    for t in &result.traces {
        if t.diverged {
            return Err(CliError::numerical(format!("method {} diverged", t.method)));
        }
    }
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> Result<(), CliError> {
    let spec = ProblemSpec::new(args.l, args.mu, args.m_hess)
        .map_err(|e| CliError::parse(e.to_string()))?;
    let mut out = String::from("k,value\n");
    match args.curve.as_str() {
        "speedup" => {
            let curve = speedup_curve(&spec, args.d0, 1..=args.k_max)
                .map_err(|e| CliError::numerical(e.to_string()))?;
            for (k, v) in curve {
                out.push_str(&format!("{k},{v}\n"));
            }
        }
        _ => {
            for k in 1..=args.k_max {
                let norms = gradient_model_bounds(&spec, args.d0, k)
                    .map_err(|e| CliError::numerical(e.to_string()))?;
                let lambda = norms.p_norm.max(1e-300);
                let b = rmpe_bound(&BoundInputs {
                    spec,
                    d0: args.d0,
                    k,
                    lambda,
                    norms: Some(norms),
                })
                .map_err(|e| CliError::numerical(e.to_string()))?;
                out.push_str(&format!("{k},{b}\n"));
            }
        }
    }
    match args.out {
        Some(path) => std::fs::write(&path, out)
            .map_err(|e| CliError::parse(format!("writing {}: {e}", path.display())))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), CliError> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{}: {}", name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);

    // Exact recovery of a linear fixed point from a full window.
    let ok = (0..10).all(|_| {
        let n = 4;
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = (&g + g.transpose()) * 0.5;
        let a = &sym * (0.8 / sym.norm());
        let fp = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let Ok(model) = LinearModel::new(a, fp) else {
            return false;
        };
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mut w = IterateWindow::with_capacity(n + 2);
        for x in model.iterates(&x0, n + 2) {
            w.push(x).unwrap();
        }
        let u = build_difference_matrix(&w).unwrap();
        let Ok(c) = rmpe_coefficients(&u, 0.0) else {
            return false;
        };
        let xe = extrapolate_with(&w, &c).unwrap();
        (xe - model.fixed_point()).norm() <= 1e-8 * model.fixed_point().norm().max(1.0)
    });
    check("exact linear recovery", ok);

    // Online Cholesky appends match the batch solve.
    let ok = (0..10).all(|_| {
        let n = 12;
        let k = 6;
        let cols = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let lambda = 1e-3;
        let mut state = CholeskyState::empty(lambda);
        for j in 0..k {
            let prefix = seqaccel::extrapolation::DifferenceMatrix::from_matrix(
                cols.columns(0, j).into_owned(),
            );
            let col = cols.column(j).into_owned();
            state = match seqaccel::extrapolation::cholesky_append(&state, &prefix, &col) {
                Ok(s) => s,
                Err(_) => return false,
            };
        }
        let online = state.coefficients().unwrap();
        let gram = cols.transpose() * &cols;
        let batch = seqaccel::extrapolation::coefficients_from_gram(&gram, lambda, None).unwrap();
        (online.c - batch.c).norm() <= 1e-10
    });
    check("online cholesky equals batch", ok);

    // Weight norm bound under regularization.
    let ok = (0..200).all(|_| {
        let n = 8;
        let k = 4;
        let cols = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let lambda = 10f64.powf(rng.gen_range(-6.0..2.0));
        let u = seqaccel::extrapolation::DifferenceMatrix::from_matrix(cols);
        let Ok(c) = rmpe_coefficients(&u, lambda) else {
            return false;
        };
        let bound = ((lambda + u.spectral_norm().powi(2)) / (k as f64 * lambda)).sqrt();
        c.c.norm() <= bound * (1.0 + 1e-12)
    });
    check("regularized weight norm bound", ok);

    if failures == 0 {
        Ok(())
    } else {
        Err(CliError::numerical(format!("{failures} selftest failures")))
    }
}
