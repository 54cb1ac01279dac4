//! Seeded multi-replication studies at a fixed signal.
//!
//! The signal `x₀` is drawn once from the master seed; replication `r` draws
//! its own design and noise from substreams keyed by `r`, so every record is
//! a pure function of `(config, r)` and aggregates do not depend on the
//! worker count.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::inference::{hypothesis_test, infer, soft_threshold, InferenceResult, RateCounts, TestOutcome};
use crate::io::{self, fmt, write_table, InferenceSummary};
use crate::lasso::{fit_path, LassoFit, SolverOptions};
use crate::normal;
use crate::rng::{substream, Purpose, SHARED};
use crate::selection::{
    argmin_prefer_larger, default_grid, estimate_sigma2, kfold_cv, looe, NoiseSource, DEFAULT_FOLDS,
    DEFAULT_GRID_DEPTH, DEFAULT_GRID_POINTS,
};
use crate::signal::{generate_signal, ProblemInstance};
use crate::spectral::{spectral_state, SpectralState};
use crate::util::float;

fn default_alphas() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.2, 0.5]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_grid_depth() -> f64 {
    DEFAULT_GRID_DEPTH
}

fn default_workers() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ensemble: EnsembleSpec,
    pub n: usize,
    pub rho: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub sigma2_mode: NoiseSource,
    /// Single regularization value. With neither this nor `lambda_grid`,
    /// the grid is the default log grid of replication 0's instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    pub n_replications: usize,
    pub seed: u64,
    /// Significance levels of the per-coordinate tests.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Level of the confidence intervals.
    #[serde(default = "default_alpha")]
    pub alpha_ci: f64,
    /// Level used for the per-coordinate reject column.
    #[serde(default = "default_alpha")]
    pub alpha_test: f64,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    /// Size and depth of log grids built from `‖Aᵀy‖_∞` (default λ grid and CV grid).
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_grid_depth")]
    pub grid_depth: f64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Write one CSV per replication.
    #[serde(default = "yes")]
    pub write_replications: bool,
}

impl ExperimentConfig {
    pub fn new(ensemble: EnsembleSpec, n: usize, rho: f64, sigma2: f64, output_dir: PathBuf) -> Self {
        Self {
            ensemble,
            n,
            rho,
            sigma2,
            sigma2_mode: NoiseSource::Known,
            lambda: None,
            lambda_grid: None,
            n_replications: 1,
            seed: 0,
            alphas: default_alphas(),
            alpha_ci: default_alpha(),
            alpha_test: default_alpha(),
            cv_folds: DEFAULT_FOLDS,
            grid_points: DEFAULT_GRID_POINTS,
            grid_depth: DEFAULT_GRID_DEPTH,
            output_dir,
            workers: 1,
            solver: SolverOptions::default(),
            write_replications: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        self.ensemble.validate()?;
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        let m = self.ensemble.rows_for(self.n);
        if m < 1 {
            return bad(format!("gamma {} gives no rows at n = {}", self.ensemble.gamma, self.n));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be non-negative, got {}", self.sigma2));
        }
        if self.n_replications < 1 {
            return bad("n_replications must be at least 1".into());
        }
        if self.lambda.is_some() && self.lambda_grid.is_some() {
            return bad("give either lambda or lambda_grid, not both".into());
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("lambda must be positive, got {l}"));
            }
        }
        if let Some(g) = &self.lambda_grid {
            if g.is_empty() || g.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return bad("lambda_grid must be nonempty and positive".into());
            }
            if g.windows(2).any(|w| !(w[1] < w[0])) {
                return bad("lambda_grid must be strictly decreasing".into());
            }
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("alphas must be a nonempty list in (0, 1)".into());
        }
        if self.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("alphas must be strictly ascending".into());
        }
        for (name, a) in [("alpha_ci", self.alpha_ci), ("alpha_test", self.alpha_test)] {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {a}"));
            }
        }
        if self.grid_points < 2 || !(self.grid_depth > 1.0) {
            return bad("grid_points must be at least 2 and grid_depth above 1".into());
        }
        if self.sigma2_mode == NoiseSource::Estimated && !(2..=m).contains(&self.cv_folds) {
            return bad(format!("cv_folds must lie in [2, M = {m}], got {}", self.cv_folds));
        }
        if self.workers < 1 {
            return bad("workers must be at least 1".into());
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_sweeps == 0 {
            return bad("solver tolerance and max_sweeps must be positive".into());
        }
        Ok(())
    }

    /// The fixed signal shared by all replications.
    pub fn signal(&self) -> Result<DVector<f64>> {
        generate_signal(self.n, self.rho, &mut substream(self.seed, SHARED, Purpose::Signal))
    }

    pub fn instance(&self, x0: &DVector<f64>, replication: u64) -> Result<ProblemInstance> {
        ProblemInstance::with_signal(
            &self.ensemble,
            x0.clone(),
            self.rho,
            self.sigma2,
            self.seed,
            replication,
        )
    }

    /// The λ values every replication is evaluated at.
    pub fn resolve_grid(&self, x0: &DVector<f64>) -> Result<Vec<f64>> {
        if let Some(l) = self.lambda {
            return Ok(vec![l]);
        }
        if let Some(g) = &self.lambda_grid {
            return Ok(g.clone());
        }
        let reference = self.instance(x0, 0)?;
        Ok(default_grid(
            &reference.a,
            &reference.y,
            self.grid_points,
            self.grid_depth,
        ))
    }
}

/// Sums of deviations over coordinates, kept raw so replications pool exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    /// Σ (hᵢ − Q̂x₀ᵢ)
    pub field_sum: f64,
    pub field_sumsq: f64,
    /// Σ (x̂ᵢ^debiased − x₀ᵢ)
    pub debiased_sum: f64,
    pub debiased_sumsq: f64,
}

impl Moments {
    fn of(result: &InferenceResult, x0: &DVector<f64>) -> Self {
        let mut m = Moments {
            count: x0.len(),
            ..Self::default()
        };
        for i in 0..x0.len() {
            let f = result.h[i] - result.q_hat * x0[i];
            let d = result.x_debiased[i] - x0[i];
            m.field_sum += f;
            m.field_sumsq += f * f;
            m.debiased_sum += d;
            m.debiased_sumsq += d * d;
        }
        m
    }

    pub fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        self.field_sum += o.field_sum;
        self.field_sumsq += o.field_sumsq;
        self.debiased_sum += o.debiased_sum;
        self.debiased_sumsq += o.debiased_sumsq;
    }

    fn var(sum: f64, sumsq: f64, n: usize) -> f64 {
        let n = n as f64;
        (sumsq - sum * sum / n) / (n - 1.0)
    }

    pub fn field_var(&self) -> f64 {
        Self::var(self.field_sum, self.field_sumsq, self.count)
    }

    pub fn debiased_mean(&self) -> f64 {
        self.debiased_sum / self.count as f64
    }

    pub fn debiased_var(&self) -> f64 {
        Self::var(self.debiased_sum, self.debiased_sumsq, self.count)
    }
}

/// One λ of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub lambda: f64,
    pub rho_active: f64,
    pub rss: f64,
    pub kkt_residual: f64,
    pub sweeps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<SpectralState>,
    #[serde(with = "float")]
    pub looe: f64,
    /// χ̂/Q̂²
    #[serde(with = "float")]
    pub ci_width: f64,
    /// KS distance of the standardized fields to N(0, 1).
    #[serde(with = "float")]
    pub ks: f64,
    /// max |ST(hᵢ) − x̂ᵢ|
    #[serde(with = "float")]
    pub tap_residual: f64,
    pub moments: Moments,
    pub covered: usize,
    /// One entry per configured significance level.
    pub tests: Vec<RateCounts>,
    /// LASSO support against the true support.
    pub support: RateCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub seed: u64,
    pub m: usize,
    pub sigma2_used: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_cv: Option<f64>,
    pub points: Vec<PointRecord>,
}

impl ReplicationRecord {
    /// Grid index minimizing `criterion` (ties to larger λ).
    pub fn argmin(&self, criterion: impl Fn(&PointRecord) -> f64) -> Option<usize> {
        argmin_prefer_larger(&self.points.iter().map(criterion).collect::<Vec<_>>())
    }
}

/// Full vectors of one replication at one λ, for per-coordinate output.
pub struct Detail {
    pub instance: ProblemInstance,
    pub fit: LassoFit,
    pub state: SpectralState,
    pub inference: InferenceResult,
    pub test: TestOutcome,
    pub sigma2_used: f64,
    pub sigma2_hat: Option<f64>,
}

fn noise_level(
    config: &ExperimentConfig,
    inst: &ProblemInstance,
    replication: u64,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    match config.sigma2_mode {
        NoiseSource::Known => Ok((config.sigma2, None, None)),
        NoiseSource::Estimated => {
            let grid = default_grid(&inst.a, &inst.y, config.grid_points, config.grid_depth);
            let fold_seed = substream(config.seed, replication, Purpose::Folds).next_u64();
            let cv = kfold_cv(&inst.a, &inst.y, &grid, config.cv_folds, fold_seed, &config.solver)?;
            let path = fit_path(&inst.a, &inst.y, &grid[..=cv.best_index], &config.solver)?;
            let s = estimate_sigma2(path.last().expect("nonempty"), &inst.a, &inst.y)?;
            Ok((s, Some(s), Some(cv.lambda_cv)))
        }
    }
}

fn point_record(
    config: &ExperimentConfig,
    inst: &ProblemInstance,
    ensemble: &EnsembleSpec,
    fit: &LassoFit,
    sigma2: f64,
) -> (PointRecord, Option<(SpectralState, InferenceResult)>) {
    let support = RateCounts::tally((0..fit.n()).map(|i| fit.is_active(i)), &inst.x0);
    let mut rec = PointRecord {
        lambda: fit.lambda,
        rho_active: fit.rho_active,
        rss: fit.rss,
        kkt_residual: fit.kkt_residual,
        sweeps: fit.sweeps,
        state: None,
        looe: f64::NAN,
        ci_width: f64::NAN,
        ks: f64::NAN,
        tap_residual: f64::NAN,
        moments: Moments::default(),
        covered: 0,
        tests: Vec::new(),
        support,
        error: None,
    };
    let (state, result) = match infer(&inst.a, &inst.y, fit, ensemble, sigma2, config.alpha_ci) {
        Ok(v) => v,
        Err(e) => {
            rec.error = Some(e.to_string());
            return (rec, None);
        }
    };
    rec.state = Some(state);
    rec.looe = spectral_state(ensemble, fit.rho_active)
        .and_then(|s| looe(fit, &s, ensemble.gamma))
        .unwrap_or(f64::NAN);
    rec.ci_width = result.chi_hat / (result.q_hat * result.q_hat);
    rec.ks = normal::ks_distance(result.standardized_fields(&inst.x0).as_slice());
    rec.tap_residual = (0..fit.n())
        .map(|i| (soft_threshold(result.h[i], fit.lambda, result.q_hat) - fit.x_hat[i]).abs())
        .fold(0.0, f64::max);
    rec.moments = Moments::of(&result, &inst.x0);
    rec.covered = (0..fit.n()).filter(|&i| result.covers(i, inst.x0[i])).count();
    rec.tests = config
        .alphas
        .iter()
        .map(|&a| RateCounts::tally(result.p_values.iter().map(|&p| p <= a), &inst.x0))
        .collect();
    (rec, Some((state, result)))
}

/// Runs replication `r`; with `detail_at = Some(k)` also returns the full
/// vectors at grid index `k`.
pub fn run_replication(
    config: &ExperimentConfig,
    x0: &DVector<f64>,
    grid: &[f64],
    replication: u64,
    detail_at: Option<usize>,
) -> Result<(ReplicationRecord, Option<Detail>)> {
    let inst = config.instance(x0, replication)?;
    let ensemble = inst.effective_ensemble();
    let (sigma2_used, sigma2_hat, lambda_cv) = noise_level(config, &inst, replication)?;
    let path = fit_path(&inst.a, &inst.y, grid, &config.solver)?;
    let mut points = Vec::with_capacity(path.len());
    let mut detail = None;
    for (k, fit) in path.iter().enumerate() {
        let (rec, full) = point_record(config, &inst, &ensemble, fit, sigma2_used);
        if detail_at == Some(k) {
            if let Some((state, inference)) = full {
                let test = hypothesis_test(&inference.p_values, config.alpha_test, &inst.x0)?;
                detail = Some((fit.clone(), state, inference, test));
            }
        }
        points.push(rec);
    }
    let record = ReplicationRecord {
        replication,
        seed: config.seed,
        m: inst.m(),
        sigma2_used,
        sigma2_hat,
        lambda_cv,
        points,
    };
    let detail = detail.map(|(fit, state, inference, test)| Detail {
        instance: inst,
        fit,
        state,
        inference,
        test,
        sigma2_used,
        sigma2_hat,
    });
    Ok((record, detail))
}

fn guarded(config: &ExperimentConfig, x0: &DVector<f64>, grid: &[f64], r: u64) -> Result<ReplicationRecord> {
    let outcome = catch_unwind(AssertUnwindSafe(|| run_replication(config, x0, grid, r, None)));
    let fail = |message: String| Error::Replication {
        replication: r as usize,
        seed: config.seed,
        message,
    };
    match outcome {
        Ok(Ok((record, _))) => Ok(record),
        Ok(Err(e)) => Err(fail(e.to_string())),
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "worker panicked".into());
            Err(fail(message))
        }
    }
}

/// All replication records, ordered by index.
pub fn run_replications(config: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    let x0 = config.signal()?;
    let grid = config.resolve_grid(&x0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {} workers: {e}", config.workers)))?;
    pool.install(|| {
        (0..config.n_replications as u64)
            .into_par_iter()
            .map(|r| guarded(config, &x0, &grid, r))
            .collect()
    })
}

/// Pooled statistics of one grid point over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub lambda: f64,
    /// Replications in which the construction was defined at this λ.
    pub valid: usize,
    pub rho_active_mean: f64,
    #[serde(with = "float")]
    pub q_hat_mean: f64,
    #[serde(with = "float")]
    pub chi_hat_mean: f64,
    /// Mean of χ̂/Q̂².
    #[serde(with = "float")]
    pub ci_width_mean: f64,
    #[serde(with = "float")]
    pub looe_mean: f64,
    #[serde(with = "float")]
    pub bias: f64,
    /// Standard error of `bias`.
    #[serde(with = "float")]
    pub bias_se: f64,
    /// Pooled variance of hᵢ − Q̂x₀ᵢ.
    #[serde(with = "float")]
    pub field_var: f64,
    /// Pooled variance of x̂ᵢ^debiased − x₀ᵢ.
    #[serde(with = "float")]
    pub debiased_var: f64,
    #[serde(with = "float")]
    pub coverage: f64,
    #[serde(with = "float")]
    pub ks_mean: f64,
    #[serde(with = "float")]
    pub tap_residual_max: f64,
    pub tests: Vec<RateCounts>,
    pub support: RateCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub m: usize,
    pub gamma_effective: f64,
    pub replications: usize,
    #[serde(with = "float")]
    pub sigma2_hat_mean: f64,
    pub points: Vec<PointSummary>,
    /// Grid index of the smallest mean CI-width criterion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_width_argmin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub looe_argmin: Option<usize>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for v in values {
        s += v;
        c += 1;
    }
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

pub fn aggregate(config: &ExperimentConfig, records: &[ReplicationRecord]) -> Result<ExperimentSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Parameter("no replication records".into()))?;
    let width = first.points.len();
    if records.iter().any(|r| r.points.len() != width) {
        return Err(Error::Shape("replication records disagree in grid length".into()));
    }
    let points: Vec<PointSummary> = (0..width)
        .map(|k| {
            let all: Vec<&PointRecord> = records.iter().map(|r| &r.points[k]).collect();
            let ok: Vec<&PointRecord> = all.iter().copied().filter(|p| p.state.is_some()).collect();
            let mut moments = Moments::default();
            let mut tests = vec![RateCounts::default(); config.alphas.len()];
            let mut support = RateCounts::default();
            let mut covered = 0;
            for p in &ok {
                moments.merge(&p.moments);
                covered += p.covered;
                for (t, c) in tests.iter_mut().zip(&p.tests) {
                    t.merge(c);
                }
            }
            for p in &all {
                support.merge(&p.support);
            }
            let n = moments.count as f64;
            let debiased_var = moments.debiased_var();
            PointSummary {
                lambda: all[0].lambda,
                valid: ok.len(),
                rho_active_mean: mean_of(all.iter().map(|p| p.rho_active)),
                q_hat_mean: mean_of(ok.iter().map(|p| p.state.unwrap().q_hat)),
                chi_hat_mean: mean_of(ok.iter().map(|p| p.state.unwrap().chi_hat.unwrap())),
                ci_width_mean: mean_of(ok.iter().map(|p| p.ci_width)),
                looe_mean: mean_of(ok.iter().map(|p| p.looe)),
                bias: moments.debiased_mean(),
                bias_se: (debiased_var / n).sqrt(),
                field_var: moments.field_var(),
                debiased_var,
                coverage: covered as f64 / n,
                ks_mean: mean_of(ok.iter().map(|p| p.ks)),
                tap_residual_max: ok.iter().map(|p| p.tap_residual).fold(f64::NAN, f64::max),
                tests,
                support,
            }
        })
        .collect();
    let ci: Vec<f64> = points
        .iter()
        .map(|p| {
            if p.valid == records.len() {
                p.ci_width_mean
            } else {
                f64::NAN
            }
        })
        .collect();
    let lo: Vec<f64> = points
        .iter()
        .map(|p| {
            if p.valid == records.len() {
                p.looe_mean
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(ExperimentSummary {
        config: config.clone(),
        m: first.m,
        gamma_effective: first.m as f64 / config.n as f64,
        replications: records.len(),
        sigma2_hat_mean: mean_of(records.iter().filter_map(|r| r.sigma2_hat)),
        ci_width_argmin: argmin_prefer_larger(&ci),
        looe_argmin: argmin_prefer_larger(&lo),
        points,
    })
}

/// Names of the files written into the output directory.
pub mod files {
    pub const SUMMARY: &str = "summary.json";
    pub const RECORDS: &str = "records.jsonl";
    pub const REPLICATIONS: &str = "replications";
    pub const COORDINATES: &str = "coordinates.csv";
    pub const COORDINATES_SUMMARY: &str = "coordinates_summary.json";
    pub const QQ: &str = "qq.csv";
    pub const BIAS_VARIANCE: &str = "bias_variance.csv";
    pub const FPR_ALPHA: &str = "fpr_alpha.csv";
    pub const ROC: &str = "roc.csv";
    pub const LASSO_ROC: &str = "lasso_roc.csv";
    pub const CI_WIDTH: &str = "ci_width.csv";
}

pub fn write_records(path: &Path, records: &[ReplicationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

fn write_replication_csv(path: &Path, record: &ReplicationRecord) -> Result<()> {
    let rows = record.points.iter().map(|p| {
        let (chi, q_hat, chi_hat) = p.state.map_or((f64::NAN, f64::NAN, f64::NAN), |s| {
            (s.chi, s.q_hat, s.chi_hat.unwrap_or(f64::NAN))
        });
        vec![
            fmt(p.lambda),
            fmt(p.rho_active),
            fmt(p.rss),
            fmt(chi),
            fmt(q_hat),
            fmt(chi_hat),
            fmt(p.looe),
            fmt(p.ci_width),
            fmt(p.ks),
            fmt(p.moments.debiased_mean()),
            fmt(p.moments.field_var()),
            fmt(p.moments.debiased_var()),
            p.covered.to_string(),
            p.error.clone().unwrap_or_default(),
        ]
    });
    write_table(
        path,
        &[
            "lambda",
            "rho_active",
            "rss",
            "chi",
            "q_hat",
            "chi_hat",
            "looe",
            "ci_width",
            "ks",
            "bias",
            "field_var",
            "debiased_var",
            "covered",
            "error",
        ],
        rows,
    )
}

/// Binomial band `p ± z √(p(1−p)/n)` with z the two-sided 99% quantile.
pub fn binomial_band(p: f64, n: usize) -> (f64, f64) {
    let half = normal::quantile(0.995) * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Focus grid index for per-coordinate output: the smallest mean CI-width
/// criterion, or the only point.
fn focus_index(summary: &ExperimentSummary) -> usize {
    summary.ci_width_argmin.unwrap_or(0)
}

/// Writes the figure tables and per-coordinate files for `records`.
pub fn write_figures(
    config: &ExperimentConfig,
    records: &[ReplicationRecord],
    summary: &ExperimentSummary,
) -> Result<()> {
    let dir = &config.output_dir;
    io::create_dir(dir)?;
    io::write_json(&dir.join(files::SUMMARY), summary)?;

    write_table(
        &dir.join(files::BIAS_VARIANCE),
        &[
            "lambda",
            "valid",
            "rho_active",
            "q_hat",
            "chi_hat",
            "field_var",
            "ci_width",
            "debiased_var",
            "bias",
            "bias_se",
            "coverage",
            "ks_mean",
        ],
        summary.points.iter().map(|p| {
            vec![
                fmt(p.lambda),
                p.valid.to_string(),
                fmt(p.rho_active_mean),
                fmt(p.q_hat_mean),
                fmt(p.chi_hat_mean),
                fmt(p.field_var),
                fmt(p.ci_width_mean),
                fmt(p.debiased_var),
                fmt(p.bias),
                fmt(p.bias_se),
                fmt(p.coverage),
                fmt(p.ks_mean),
            ]
        }),
    )?;

    let mut fpr_rows = Vec::new();
    let mut roc_rows = Vec::new();
    for p in &summary.points {
        for (alpha, c) in config.alphas.iter().zip(&p.tests) {
            let (lo, hi) = binomial_band(*alpha, c.nulls.max(1));
            fpr_rows.push(vec![
                fmt(p.lambda),
                fmt(*alpha),
                fmt(c.fpr()),
                fmt(c.tpr()),
                c.false_pos.to_string(),
                c.nulls.to_string(),
                fmt(lo),
                fmt(hi),
            ]);
            roc_rows.push(vec![fmt(p.lambda), fmt(*alpha), fmt(c.fpr()), fmt(c.tpr())]);
        }
    }
    write_table(
        &dir.join(files::FPR_ALPHA),
        &[
            "lambda",
            "alpha",
            "fpr",
            "tpr",
            "false_pos",
            "nulls",
            "band_lo",
            "band_hi",
        ],
        fpr_rows,
    )?;
    write_table(&dir.join(files::ROC), &["lambda", "alpha", "fpr", "tpr"], roc_rows)?;
    write_table(
        &dir.join(files::LASSO_ROC),
        &["lambda", "fpr", "tpr"],
        summary
            .points
            .iter()
            .map(|p| [fmt(p.lambda), fmt(p.support.fpr()), fmt(p.support.tpr())]),
    )?;
    write_table(
        &dir.join(files::CI_WIDTH),
        &["lambda", "ci_width", "looe", "debiased_var", "rho_active"],
        summary.points.iter().map(|p| {
            [
                fmt(p.lambda),
                fmt(p.ci_width_mean),
                fmt(p.looe_mean),
                fmt(p.debiased_var),
                fmt(p.rho_active_mean),
            ]
        }),
    )?;

    if config.write_replications {
        let rep_dir = dir.join(files::REPLICATIONS);
        io::create_dir(&rep_dir)?;
        for r in records {
            write_replication_csv(&rep_dir.join(format!("rep_{:05}.csv", r.replication)), r)?;
        }
    }

    // Replication 0 is recomputed to recover its full vectors.
    let x0 = config.signal()?;
    let grid: Vec<f64> = records[0].points.iter().map(|p| p.lambda).collect();
    let focus = focus_index(summary);
    let (_, detail) = run_replication(config, &x0, &grid, 0, Some(focus))?;
    match detail {
        Some(d) => {
            io::write_coordinates(
                &dir.join(files::COORDINATES),
                &d.instance.x0,
                &d.fit,
                &d.inference,
                &d.test,
            )?;
            io::write_json(
                &dir.join(files::COORDINATES_SUMMARY),
                &InferenceSummary::new(
                    d.instance.effective_ensemble(),
                    &d.fit,
                    &d.state,
                    d.sigma2_used,
                    d.sigma2_hat,
                    &d.test,
                ),
            )?;
            let mut z: Vec<f64> = d
                .inference
                .standardized_fields(&d.instance.x0)
                .iter()
                .copied()
                .collect();
            z.sort_by(f64::total_cmp);
            let n = z.len() as f64;
            write_table(
                &dir.join(files::QQ),
                &["lambda", "theoretical", "empirical"],
                z.iter()
                    .enumerate()
                    .map(|(i, v)| [fmt(d.fit.lambda), fmt(normal::quantile((i as f64 + 0.5) / n)), fmt(*v)]),
            )?;
        }
        None => {
            write_table(
                &dir.join(files::COORDINATES),
                &io::COORDINATE_HEADER,
                Vec::<Vec<String>>::new(),
            )?;
            write_table(
                &dir.join(files::QQ),
                &["lambda", "theoretical", "empirical"],
                Vec::<Vec<String>>::new(),
            )?;
        }
    }
    Ok(())
}

/// Runs every replication, then writes records, summary and figure data.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let records = run_replications(config)?;
    let summary = aggregate(config, &records)?;
    io::create_dir(&config.output_dir)?;
    write_records(&config.output_dir.join(files::RECORDS), &records)?;
    write_figures(config, &records, &summary)?;
    Ok(summary)
}

/// Rebuilds summary and figure data from a previous run's records.
pub fn regenerate_figures(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let records = read_records(&config.output_dir.join(files::RECORDS))?;
    let summary = aggregate(config, &records)?;
    write_figures(config, &records, &summary)?;
    Ok(summary)
}
