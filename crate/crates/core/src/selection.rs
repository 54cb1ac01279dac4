//! Choice of λ and σ²: K-fold cross-validation, the residual-based noise
//! estimate, the closed-form leave-one-out error and the CI-width criterion.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::io::{fmt, write_table};
use crate::lasso::{fit_path, lambda_max, LassoFit, SolverOptions};
use crate::spectral::{spectral_state, SpectralState};
use crate::util::{float, float_seq, log_grid};

pub const DEFAULT_GRID_POINTS: usize = 20;
pub const DEFAULT_GRID_DEPTH: f64 = 1e3;
pub const DEFAULT_FOLDS: usize = 40;

/// Log grid from `‖Aᵀy‖_∞` down to `‖Aᵀy‖_∞ / depth`.
pub fn default_grid(a: &DMatrix<f64>, y: &DVector<f64>, points: usize, depth: f64) -> Vec<f64> {
    let top = lambda_max(a, y);
    log_grid(top, top / depth, points)
}

/// Where σ² comes from when χ̂ is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    #[default]
    Known,
    Estimated,
}

/// Index of the smallest finite value; ties go to the earlier (larger λ) entry.
pub fn argmin_prefer_larger(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Seeded row partition: fold of row `permutation[p]` is `p mod k`.
pub fn fold_assignment(m: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > m {
        return Err(Error::Parameter(format!(
            "fold count must satisfy 2 <= k <= M = {m}, got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut fold = vec![0; m];
    for (p, &row) in order.iter().enumerate() {
        fold[row] = p % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    /// Mean over folds of the held-out mean squared prediction error.
    pub cv_errors: Vec<f64>,
    pub best_index: usize,
    pub lambda_cv: f64,
}

pub fn kfold_cv(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
    options: &SolverOptions,
) -> Result<CvResult> {
    if a.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "design has {} rows but response has length {}",
            a.nrows(),
            y.len()
        )));
    }
    let fold = fold_assignment(a.nrows(), k, seed)?;
    let mut cv_errors = vec![0.0; lambda_grid.len()];
    for f in 0..k {
        let train: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] == f).collect();
        let (a_tr, y_tr) = (a.select_rows(&train), y.select_rows(&train));
        let (a_te, y_te) = (a.select_rows(&test), y.select_rows(&test));
        let path = fit_path(&a_tr, &y_tr, lambda_grid, options)?;
        for (err, fit) in cv_errors.iter_mut().zip(&path) {
            *err += (&y_te - &a_te * &fit.x_hat).norm_squared() / test.len() as f64;
        }
    }
    cv_errors.iter_mut().for_each(|e| *e /= k as f64);
    let best_index =
        argmin_prefer_larger(&cv_errors).ok_or_else(|| Error::Numeric("no finite cross-validation error".into()))?;
    Ok(CvResult {
        lambda_cv: lambda_grid[best_index],
        lambda_grid: lambda_grid.to_vec(),
        cv_errors,
        best_index,
    })
}

/// `σ̂² = ‖y − A x̂‖² / (M − N ϱ_active)`
pub fn estimate_sigma2(fit: &LassoFit, a: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if a.nrows() != y.len() || a.ncols() != fit.n() {
        return Err(Error::Shape("fit, design and response disagree in size".into()));
    }
    let dof = a.nrows() as f64 - fit.n() as f64 * fit.rho_active;
    if !(dof > 0.0) {
        return Err(Error::Degenerate(format!(
            "support of size {} leaves no residual degrees of freedom with M = {}",
            fit.active_count(),
            a.nrows()
        )));
    }
    Ok((y - a * &fit.x_hat).norm_squared() / dof)
}

/// Leave-one-out error `C = (1 − ϱ_active/γ)⁻² RSS`, checked against the
/// spectral form `(1 − 2χG′/γ)⁻² RSS`.
pub fn looe(fit: &LassoFit, state: &SpectralState, gamma: f64) -> Result<f64> {
    let rho = fit.rho_active;
    if rho >= gamma {
        return Err(Error::Degenerate(format!(
            "active density {rho} reaches the measurement ratio {gamma}"
        )));
    }
    let direct = fit.rss / (1.0 - rho / gamma).powi(2);
    let spectral = fit.rss / (1.0 - 2.0 * state.chi * state.g1 / gamma).powi(2);
    if (direct - spectral).abs() > 1e-10 * direct.max(1.0) {
        return Err(Error::Numeric(format!(
            "leave-one-out forms disagree: {direct} vs {spectral}"
        )));
    }
    Ok(direct)
}

/// Grid index minimizing the CI-width criterion (ties to larger λ).
pub fn select_by_ci_width(criterion: &[f64]) -> Result<usize> {
    if criterion.len() < 2 {
        return Err(Error::Parameter("criterion needs at least two grid points".into()));
    }
    argmin_prefer_larger(criterion).ok_or_else(|| Error::Degenerate("criterion is nowhere finite".into()))
}

/// Quantities of one full-data fit on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub fit: LassoFit,
    /// `None` where the spectral construction does not exist.
    pub state: Option<SpectralState>,
    pub looe: f64,
    /// χ̂/Q̂², the squared CI half-width up to the quantile factor.
    pub ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub lambda_grid: Vec<f64>,
    #[serde(with = "float_seq")]
    pub cv_errors: Vec<f64>,
    #[serde(with = "float_seq")]
    pub looe: Vec<f64>,
    #[serde(with = "float_seq")]
    pub ci_width: Vec<f64>,
    #[serde(with = "float_seq")]
    pub rho_active: Vec<f64>,
    #[serde(with = "float")]
    pub lambda_cv: f64,
    #[serde(with = "float")]
    pub lambda_ci: f64,
    #[serde(with = "float")]
    pub lambda_looe: f64,
    pub sigma2_hat: f64,
    pub sigma2_used: f64,
}

impl SelectionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = (0..self.lambda_grid.len()).map(|i| {
            [
                self.lambda_grid[i],
                self.cv_errors[i],
                self.looe[i],
                self.ci_width[i],
                self.rho_active[i],
            ]
            .map(fmt)
        });
        write_table(path, &["lambda", "cv_error", "looe", "ci_width", "rho_active"], rows)
    }
}

/// Evaluates looe and χ̂/Q̂² along a fitted path. Grid points where the
/// construction degenerates get non-finite criterion values.
pub fn evaluate_path(path: Vec<LassoFit>, ensemble: &EnsembleSpec, sigma2: f64) -> Vec<GridPoint> {
    path.into_iter()
        .map(|fit| {
            let state = spectral_state(ensemble, fit.rho_active)
                .and_then(|s| s.with_chi_hat(ensemble.gamma, fit.rss, sigma2))
                .ok();
            let looe = state
                .as_ref()
                .and_then(|s| looe(&fit, s, ensemble.gamma).ok())
                .unwrap_or(f64::NAN);
            let ci_width = state
                .as_ref()
                .map_or(f64::NAN, |s| s.chi_hat.unwrap() / (s.q_hat * s.q_hat));
            GridPoint {
                fit,
                state,
                looe,
                ci_width,
            }
        })
        .collect()
}

/// Full selection on one instance: K-fold CV, σ̂² at the CV choice, and
/// both closed-form criteria along the full-data path. `ensemble` must carry
/// the realised M/N.
#[allow(clippy::too_many_arguments)]
pub fn select(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
    ensemble: &EnsembleSpec,
    noise: NoiseSource,
    sigma2: f64,
    options: &SolverOptions,
) -> Result<(SelectionReport, Vec<GridPoint>)> {
    let cv = kfold_cv(a, y, lambda_grid, k, seed, options)?;
    let path = fit_path(a, y, lambda_grid, options)?;
    let sigma2_hat = estimate_sigma2(&path[cv.best_index], a, y)?;
    let sigma2_used = match noise {
        NoiseSource::Known => sigma2,
        NoiseSource::Estimated => sigma2_hat,
    };
    let points = evaluate_path(path, ensemble, sigma2_used);
    let looe: Vec<f64> = points.iter().map(|p| p.looe).collect();
    let ci_width: Vec<f64> = points.iter().map(|p| p.ci_width).collect();
    let pick = |v: &[f64]| argmin_prefer_larger(v).map_or(f64::NAN, |i| lambda_grid[i]);
    let report = SelectionReport {
        lambda_grid: lambda_grid.to_vec(),
        rho_active: points.iter().map(|p| p.fit.rho_active).collect(),
        lambda_cv: cv.lambda_cv,
        lambda_ci: pick(&ci_width),
        lambda_looe: pick(&looe),
        cv_errors: cv.cv_errors,
        looe,
        ci_width,
        sigma2_hat,
        sigma2_used,
    };
    Ok((report, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_fit(n: usize, active: usize, rss: f64) -> LassoFit {
        let mut x = DVector::zeros(n);
        x.rows_mut(0, active).fill(1.0);
        LassoFit {
            x_hat: x,
            lambda: 1.0,
            rho_active: active as f64 / n as f64,
            rss,
            kkt_residual: 0.0,
            sweeps: 0,
        }
    }

    #[test]
    fn sigma2_direct_substitution() {
        let (m, n) = (50, 100);
        let fit = fake_fit(n, 25, 0.0);
        let a = DMatrix::from_fn(m, n, |i, j| if j < 25 && i == j { 1.0 } else { 0.0 });
        let mut y = &a * &fit.x_hat;
        let exact = y.clone();
        assert_eq!(estimate_sigma2(&fit, &a, &y).unwrap(), 0.0);
        y[40] += 0.5f64.sqrt();
        let s = estimate_sigma2(&fit, &a, &y).unwrap();
        assert!((s - 0.02).abs() < 1e-15, "{s}");
        let saturated = fake_fit(n, 50, 0.0);
        assert!(matches!(
            estimate_sigma2(&saturated, &a, &exact),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn looe_examples() {
        let spec = EnsembleSpec::gaussian(0.5).unwrap();
        let fit = fake_fit(100, 25, 0.1);
        let state = spectral_state(&spec, 0.25).unwrap();
        assert!((looe(&fit, &state, 0.5).unwrap() - 0.4).abs() < 1e-12);
        let empty = fake_fit(100, 0, 0.1);
        let state = spectral_state(&spec, 0.0).unwrap();
        assert_eq!(looe(&empty, &state, 0.5).unwrap(), 0.1);
        let full = fake_fit(100, 50, 0.1);
        assert!(matches!(looe(&full, &state, 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn argmin_ties_and_nan() {
        assert_eq!(argmin_prefer_larger(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin_prefer_larger(&[f64::NAN, 2.0, 1.0]), Some(2));
        assert_eq!(argmin_prefer_larger(&[f64::NAN]), None);
        assert_eq!(select_by_ci_width(&[4.0, 1.0, 0.5, 0.7, 2.0]).unwrap(), 2);
        assert!(select_by_ci_width(&[1.0]).is_err());
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let f = fold_assignment(103, 10, 7).unwrap();
        let mut counts = [0; 10];
        f.iter().for_each(|&i| counts[i] += 1);
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_eq!(f, fold_assignment(103, 10, 7).unwrap());
        assert_ne!(f, fold_assignment(103, 10, 8).unwrap());
        assert!(fold_assignment(5, 6, 0).is_err());
        assert!(fold_assignment(5, 1, 0).is_err());
    }

    #[test]
    fn null_model_error() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.3, 1.0, 0.5, 0.5, 0.1, -0.7]);
        let y = DVector::from_row_slice(&[1.0, -2.0, 0.5, 0.25]);
        let top = lambda_max(&a, &y);
        let cv = kfold_cv(&a, &y, &[2.0 * top, top], 2, 3, &SolverOptions::default()).unwrap();
        let fold = fold_assignment(4, 2, 3).unwrap();
        let fold_mean = |f: usize| {
            let v: Vec<f64> = (0..4).filter(|&i| fold[i] == f).map(|i| y[i] * y[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let expected = 0.5 * (fold_mean(0) + fold_mean(1));
        assert!((cv.cv_errors[0] - expected).abs() < 1e-15);
        assert_eq!(cv.best_index, 0);
    }

    /// Each coordinate is observed twice, so a held-out row always has its
    /// twin in the training set.
    #[test]
    fn noiseless_identity_prefers_small_lambda() {
        let a = DMatrix::from_fn(24, 12, |i, j| if i % 12 == j { 1.0 } else { 0.0 });
        let x0 = DVector::from_fn(12, |i, _| if i % 3 == 0 { 2.0 } else { 0.0 });
        let y = &a * &x0;
        let grid = log_grid(1.0, 1e-3, 8);
        let cv = kfold_cv(&a, &y, &grid, 4, 1, &SolverOptions::default()).unwrap();
        assert_eq!(cv.best_index, grid.len() - 1);
        assert!(cv.cv_errors.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn report_json_round_trip() {
        let r = SelectionReport {
            lambda_grid: vec![1.0, 0.5],
            cv_errors: vec![0.3, 0.2],
            looe: vec![0.1, f64::NAN],
            ci_width: vec![0.2, f64::INFINITY],
            rho_active: vec![0.0, 0.6],
            lambda_cv: 0.5,
            lambda_ci: 1.0,
            lambda_looe: 1.0,
            sigma2_hat: 0.02,
            sigma2_used: 0.02,
        };
        let text = serde_json::to_string(&r).unwrap();
        let back: SelectionReport = serde_json::from_str(&text).unwrap();
        assert!(back.looe[1].is_nan());
        assert_eq!(back.ci_width[1], f64::INFINITY);
        assert_eq!(back.lambda_grid, r.lambda_grid);
    }
}
