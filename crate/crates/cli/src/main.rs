use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lasso_tap::ensemble::{EnsembleKind, EnsembleSpec};
use lasso_tap::experiment::{regenerate_figures, run_experiment, ExperimentConfig};
use lasso_tap::inference::{hypothesis_test, infer, roc_curve};
use lasso_tap::io::{self, fmt, load_instance, save_instance, write_coordinates, InferenceSummary};
use lasso_tap::lasso::{fit_lasso, SolverOptions};
use lasso_tap::selection::{default_grid, estimate_sigma2, select, NoiseSource, DEFAULT_FOLDS};
use lasso_tap::signal::ProblemInstance;
use lasso_tap::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "lasso-tap",
    version,
    about = "LASSO inference for rotationally invariant designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic instance and save it to a directory.
    Gen(GenArgs),
    /// Fit the LASSO at one λ.
    Fit(FitArgs),
    /// De-biased estimates, confidence intervals and p-values at one λ.
    Infer(InferArgs),
    /// K-fold cross-validation and the closed-form selection criteria over a λ grid.
    Cv(CvArgs),
    /// Per-coordinate tests and their ROC over significance levels.
    Test(TestArgs),
    /// Multi-replication experiment with figure data.
    Experiment(ExperimentArgs),
    /// Rebuild figure files from the records of a finished experiment.
    Figures(FiguresArgs),
}

#[derive(Args)]
struct EnsembleArgs {
    /// gaussian-iid, row-orthogonal, random-dct or geometric
    #[arg(long)]
    ensemble: EnsembleKind,
    #[arg(long)]
    gamma: f64,
    /// Peak-to-average eigenvalue ratio (geometric only).
    #[arg(long)]
    kappa: Option<f64>,
}

impl EnsembleArgs {
    fn spec(&self) -> Result<EnsembleSpec> {
        EnsembleSpec::new(self.ensemble, self.gamma, self.kappa)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    ensemble: EnsembleArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    sigma2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = SolverOptions::default().tolerance)]
    tolerance: f64,
    #[arg(long, default_value_t = SolverOptions::default().max_sweeps)]
    max_sweeps: usize,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_sweeps: self.max_sweeps,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    lambda: f64,
    /// Where to write the estimate as a one-column CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct NoiseArgs {
    /// known: use --sigma2 (or the instance's value); estimated: residual-based estimate at the fit
    #[arg(long, default_value = "known", value_parser = parse_noise)]
    sigma2_mode: NoiseSource,
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Confidence intervals have level 1 − alpha-ci.
    #[arg(long, default_value_t = 0.05)]
    alpha_ci: f64,
    /// Level of the reject column.
    #[arg(long, default_value_t = 0.05)]
    alpha_test: f64,
    /// Output directory for coordinates.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Comma-separated strictly decreasing grid; default is a log grid from λmax.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = lasso_tap::selection::DEFAULT_GRID_POINTS)]
    grid_points: usize,
    #[arg(long, default_value_t = lasso_tap::selection::DEFAULT_GRID_DEPTH)]
    grid_depth: f64,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Comma-separated significance levels in (0, 1).
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2,0.5")]
    alphas: Vec<f64>,
    /// Output CSV of (alpha, fpr, tpr).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON configuration; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<EnsembleKind>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, value_parser = parse_noise)]
    sigma2_mode: Option<NoiseSource>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    grid_depth: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct FiguresArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_noise(s: &str) -> std::result::Result<NoiseSource, String> {
    match s {
        "known" => Ok(NoiseSource::Known),
        "estimated" => Ok(NoiseSource::Estimated),
        other => Err(format!("expected 'known' or 'estimated', got '{other}'")),
    }
}

fn missing(flag: &str) -> Error {
    Error::Parameter(format!("--{flag} is required without --config"))
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => io::read_json::<ExperimentConfig>(path)?,
            None => {
                let kind = self.ensemble.ok_or_else(|| missing("ensemble"))?;
                let gamma = self.gamma.ok_or_else(|| missing("gamma"))?;
                ExperimentConfig::new(
                    EnsembleSpec {
                        kind,
                        gamma,
                        kappa: None,
                    },
                    self.n.ok_or_else(|| missing("n"))?,
                    self.rho.ok_or_else(|| missing("rho"))?,
                    self.sigma2.ok_or_else(|| missing("sigma2"))?,
                    self.output_dir.clone().ok_or_else(|| missing("output-dir"))?,
                )
            }
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        apply!(
            n,
            rho,
            sigma2,
            sigma2_mode,
            n_replications,
            seed,
            alphas,
            cv_folds,
            grid_points,
            grid_depth,
            output_dir,
            workers
        );
        if let Some(kind) = self.ensemble {
            c.ensemble.kind = kind;
        }
        if let Some(gamma) = self.gamma {
            c.ensemble.gamma = gamma;
        }
        if self.kappa.is_some() {
            c.ensemble.kappa = self.kappa;
        }
        if self.lambda.is_some() {
            c.lambda = self.lambda;
            c.lambda_grid = None;
        }
        if self.lambda_grid.is_some() {
            c.lambda_grid = self.lambda_grid.clone();
            c.lambda = None;
        }
        c.validate()?;
        Ok(c)
    }
}

fn load(dir: &Path) -> Result<ProblemInstance> {
    Ok(load_instance(dir)?.0)
}

/// σ² for χ̂: the flag, else the instance's own value, or the residual-based
/// estimate at the given fit.
fn noise_level(
    noise: &NoiseArgs,
    inst: &ProblemInstance,
    fit: &lasso_tap::lasso::LassoFit,
) -> Result<(f64, Option<f64>)> {
    match noise.sigma2_mode {
        NoiseSource::Known => Ok((noise.sigma2.unwrap_or(inst.sigma2), None)),
        NoiseSource::Estimated => {
            let s = estimate_sigma2(fit, &inst.a, &inst.y)?;
            Ok((s, Some(s)))
        }
    }
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let spec = args.ensemble.spec()?;
            let inst = ProblemInstance::generate(&spec, args.n, args.rho, args.sigma2, args.seed)?;
            save_instance(&args.out, &inst, args.seed)?;
            print(json!({"m": inst.m(), "n": inst.n(), "nonzeros": inst.x0.iter().filter(|v| **v != 0.0).count()}));
        }
        Command::Fit(args) => {
            let inst = load(&args.instance)?;
            let fit = fit_lasso(&inst.a, &inst.y, args.lambda, &args.solver.options())?;
            if let Some(out) = &args.out {
                io::write_vector(out, "x_hat", &fit.x_hat)?;
            }
            print(json!({
                "lambda": fit.lambda,
                "rho_active": fit.rho_active,
                "rss": fit.rss,
                "kkt_residual": fit.kkt_residual,
                "sweeps": fit.sweeps,
            }));
        }
        Command::Infer(args) => {
            let inst = load(&args.instance)?;
            let fit = fit_lasso(&inst.a, &inst.y, args.lambda, &args.solver.options())?;
            let (sigma2, sigma2_hat) = noise_level(&args.noise, &inst, &fit)?;
            let eff = inst.effective_ensemble();
            let (state, res) = infer(&inst.a, &inst.y, &fit, &eff, sigma2, args.alpha_ci)?;
            let test = hypothesis_test(&res.p_values, args.alpha_test, &inst.x0)?;
            io::create_dir(&args.out)?;
            write_coordinates(&args.out.join("coordinates.csv"), &inst.x0, &fit, &res, &test)?;
            let summary = InferenceSummary::new(eff, &fit, &state, sigma2, sigma2_hat, &test);
            io::write_json(&args.out.join("summary.json"), &summary)?;
            print(serde_json::to_value(&summary).expect("serializable"));
        }
        Command::Cv(args) => {
            let inst = load(&args.instance)?;
            let grid = match &args.lambda_grid {
                Some(g) => g.clone(),
                None => default_grid(&inst.a, &inst.y, args.grid_points, args.grid_depth),
            };
            let sigma2 = args.noise.sigma2.unwrap_or(inst.sigma2);
            let (report, _) = select(
                &inst.a,
                &inst.y,
                &grid,
                args.folds,
                args.seed,
                &inst.effective_ensemble(),
                args.noise.sigma2_mode,
                sigma2,
                &args.solver.options(),
            )?;
            io::create_dir(&args.out)?;
            report.write_csv(&args.out.join("selection.csv"))?;
            io::write_json(&args.out.join("selection.json"), &report)?;
            print(json!({
                "lambda_cv": report.lambda_cv,
                "lambda_ci": report.lambda_ci,
                "lambda_looe": report.lambda_looe,
                "sigma2_hat": report.sigma2_hat,
            }));
        }
        Command::Test(args) => {
            let inst = load(&args.instance)?;
            let fit = fit_lasso(&inst.a, &inst.y, args.lambda, &args.solver.options())?;
            let (sigma2, _) = noise_level(&args.noise, &inst, &fit)?;
            let (_, res) = infer(&inst.a, &inst.y, &fit, &inst.effective_ensemble(), sigma2, 0.05)?;
            let roc = roc_curve(&res.p_values, &inst.x0, &args.alphas)?;
            io::write_table(
                &args.out,
                &["alpha", "fpr", "tpr"],
                roc.iter().map(|p| [fmt(p.parameter), fmt(p.fpr), fmt(p.tpr)]),
            )?;
            print(serde_json::to_value(&roc).expect("serializable"));
        }
        Command::Experiment(args) => {
            let summary = run_experiment(&args.config()?)?;
            print(json!({
                "output_dir": summary.config.output_dir,
                "replications": summary.replications,
                "points": summary.points.len(),
                "ci_width_argmin": summary.ci_width_argmin,
                "looe_argmin": summary.looe_argmin,
            }));
        }
        Command::Figures(args) => {
            let summary = regenerate_figures(&ExperimentConfig::load(&args.config)?)?;
            print(json!({"output_dir": summary.config.output_dir, "points": summary.points.len()}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
