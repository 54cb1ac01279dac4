use lasso_tap::ensemble::EnsembleSpec;
use lasso_tap::lasso::{fit_lasso, lambda_max, SolverOptions};
use lasso_tap::selection::{kfold_cv, looe};
use lasso_tap::signal::ProblemInstance;
use lasso_tap::spectral::spectral_state;
use nalgebra::{DMatrix, DVector};

fn tight() -> SolverOptions {
    SolverOptions {
        tolerance: 1e-13,
        ..SolverOptions::default()
    }
}

/// Mean squared error of predicting each row from a fit without it.
fn explicit_loo(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let m = a.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let keep: Vec<usize> = (0..m).filter(|&r| r != i).collect();
        let fit = fit_lasso(&a.select_rows(&keep), &y.select_rows(&keep), lambda, &tight()).unwrap();
        let pred = a.row(i).dot(&fit.x_hat.transpose());
        total += (y[i] - pred).powi(2);
    }
    total / m as f64
}

#[test]
fn folds_of_one_row_are_leave_one_out() {
    let spec = EnsembleSpec::gaussian(0.5).unwrap();
    let inst = ProblemInstance::generate(&spec, 24, 0.2, 0.02, 17).unwrap();
    let top = lambda_max(&inst.a, &inst.y);
    let grid = [0.5 * top, 0.2 * top, 0.05 * top];
    let cv = kfold_cv(&inst.a, &inst.y, &grid, inst.m(), 99, &tight()).unwrap();
    for (lambda, err) in grid.iter().zip(&cv.cv_errors) {
        let oracle = explicit_loo(&inst.a, &inst.y, *lambda);
        assert!((err - oracle).abs() < 1e-10, "lambda {lambda}: {err} vs {oracle}");
    }
}

/// The closed form is asymptotic; at M = 40 single instances scatter, so the
/// comparison is between means over instances.
#[test]
fn closed_form_looe_tracks_refitting() {
    let spec = EnsembleSpec::gaussian(0.5).unwrap();
    let (mut closed, mut refit) = (0.0, 0.0);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = ProblemInstance::generate(&spec, 80, 0.1, 0.02, seed).unwrap();
        let lambda = 0.2 * lambda_max(&inst.a, &inst.y);
        let fit = fit_lasso(&inst.a, &inst.y, lambda, &tight()).unwrap();
        let eff = inst.effective_ensemble();
        let state = spectral_state(&eff, fit.rho_active).unwrap();
        let c = looe(&fit, &state, eff.gamma).unwrap();
        let oracle = explicit_loo(&inst.a, &inst.y, lambda);
        worst = worst.max((c - oracle).abs() / oracle);
        closed += c;
        refit += oracle;
    }
    let rel = (closed - refit).abs() / refit;
    println!("mean relative gap {rel:.4}, worst single instance {worst:.3}");
    assert!(rel < 0.15, "closed form {} vs refit {}", closed / 20.0, refit / 20.0);
}
