use lasso_tap::lasso::{fit_lasso, fit_path, lambda_max, objective, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let sd = 1.0 / (m as f64).sqrt();
    DMatrix::from_fn(m, n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn sparse_response(a: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let x0 = DVector::from_fn(a.ncols(), |_, _| {
        if rng.random::<f64>() < 0.2 {
            rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    });
    let noise = DVector::from_fn(a.nrows(), |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    a * x0 + noise
}

/// Minimum over every (support, sign) pattern of the stationary point of the
/// smooth restriction, keeping only sign-consistent candidates.
fn sign_pattern_oracle(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let n = a.ncols();
    let mut best = objective(a, y, &DVector::zeros(n), lambda);
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        for signs in 0u32..(1 << support.len()) {
            let s: Vec<f64> = (0..support.len())
                .map(|k| if signs & (1 << k) != 0 { -1.0 } else { 1.0 })
                .collect();
            let sub = a.select_columns(&support);
            let gram = sub.tr_mul(&sub);
            let rhs = sub.tr_mul(y) - DVector::from_vec(s.clone()) * lambda;
            let Some(xs) = gram.lu().solve(&rhs) else { continue };
            if xs.iter().zip(&s).any(|(v, sg)| v * sg <= 0.0) {
                continue;
            }
            let mut x = DVector::zeros(n);
            for (k, &j) in support.iter().enumerate() {
                x[j] = xs[k];
            }
            best = best.min(objective(a, y, &x, lambda));
        }
    }
    best
}

/// Grid search around the least-squares point, zooming in on the best cell.
fn grid_oracle(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let ls = a.clone().svd(true, true).solve(y, 1e-14).unwrap();
    let mut centre = [ls[0], ls[1]];
    let mut half = 2.0 * (ls.amax() + 1.0);
    let steps = 200;
    let mut best = f64::INFINITY;
    for _ in 0..12 {
        let mut arg = centre;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = DVector::from_vec(vec![
                    centre[0] - half + 2.0 * half * i as f64 / steps as f64,
                    centre[1] - half + 2.0 * half * j as f64 / steps as f64,
                ]);
                let f = objective(a, y, &x, lambda);
                if f < best {
                    best = f;
                    arg = [x[0], x[1]];
                }
            }
        }
        centre = arg;
        half *= 4.0 / steps as f64;
    }
    best
}

#[test]
fn three_by_two_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let a = gaussian(3, 2, &mut rng);
        let y = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = lambda_max(&a, &y) * rng.random_range(0.05..0.95);
        let fit = fit_lasso(&a, &y, lambda, &SolverOptions::default()).unwrap();
        let f = objective(&a, &y, &fit.x_hat, lambda);
        let exact = sign_pattern_oracle(&a, &y, lambda);
        let grid = grid_oracle(&a, &y, lambda);
        assert!((f - exact).abs() < 1e-6, "trial {trial}: {f} vs sign-pattern {exact}");
        assert!((f - grid).abs() < 1e-6, "trial {trial}: {f} vs grid {grid}");
    }
}

/// Normalized KKT residual computed from scratch.
fn kkt_violation(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>, lambda: f64) -> f64 {
    let g = a.tr_mul(&(y - a * x));
    let worst = g
        .iter()
        .zip(x.iter())
        .map(|(&gj, &xj)| {
            if xj != 0.0 {
                (gj - lambda * xj.signum()).abs()
            } else {
                (gj.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max);
    worst / lambda.max(1.0)
}

#[test]
fn kkt_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let m = rng.random_range(1..=n);
        let a = gaussian(m, n, &mut rng);
        let y = sparse_response(&a, &mut rng);
        let lambda = lambda_max(&a, &y) * 10f64.powf(rng.random_range(-3.0..0.0));
        let fit = fit_lasso(&a, &y, lambda, &SolverOptions::default())
            .unwrap_or_else(|e| panic!("n={n} m={m} lambda={lambda}: {e:?}"));
        let v = kkt_violation(&a, &y, &fit.x_hat, lambda);
        worst = worst.max(v);
        assert!(v < 1e-8, "KKT violation {v} at n={n} m={m} lambda={lambda}");
        assert!(fit.active_count() <= m, "support {} exceeds m={m}", fit.active_count());
        let rss = (&y - &a * &fit.x_hat).norm_squared() / m as f64;
        assert!((fit.rss - rss).abs() <= 1e-12 * rss.max(1.0));
    }
    println!("worst KKT residual over 100 instances: {worst:.3e}");
}

#[test]
fn path_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gaussian(60, 120, &mut rng);
    let y = sparse_response(&a, &mut rng);
    let lmax = lambda_max(&a, &y);
    let opts = SolverOptions::default();

    let first = fit_path(&a, &y, &[lmax, lmax / 2.0], &opts).unwrap();
    assert!(first[0].x_hat.iter().all(|v| *v == 0.0));

    let single = fit_path(&a, &y, &[lmax / 7.0], &opts).unwrap();
    assert_eq!(single[0], fit_lasso(&a, &y, lmax / 7.0, &opts).unwrap());

    let grid = lasso_tap::util::log_grid(lmax, lmax / 1000.0, 20);
    let path = fit_path(&a, &y, &grid, &opts).unwrap();
    for w in path.windows(2) {
        assert!(
            w[1].rss <= w[0].rss * (1.0 + 1e-9) + 1e-15,
            "RSS increased along the path"
        );
    }
    for fit in &path {
        let cold = fit_lasso(&a, &y, fit.lambda, &opts).unwrap();
        let (fw, fc) = (
            objective(&a, &y, &fit.x_hat, fit.lambda),
            objective(&a, &y, &cold.x_hat, fit.lambda),
        );
        assert!((fw - fc).abs() <= 1e-8 * fc.max(1.0));
    }
}

#[test]
fn deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = gaussian(40, 90, &mut rng);
    let y = sparse_response(&a, &mut rng);
    let lambda = lambda_max(&a, &y) / 20.0;
    let one = fit_lasso(&a, &y, lambda, &SolverOptions::default()).unwrap();
    let two = fit_lasso(&a, &y, lambda, &SolverOptions::default()).unwrap();
    assert_eq!(one, two);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn local_optimality_probe(seed in any::<u64>(), m in 5usize..40, extra in 0usize..40, frac in 0.01f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m + extra;
        let a = gaussian(m, n, &mut rng);
        let y = sparse_response(&a, &mut rng);
        let lambda = lambda_max(&a, &y) * frac;
        let fit = fit_lasso(&a, &y, lambda, &SolverOptions::default()).unwrap();
        let f = objective(&a, &y, &fit.x_hat, lambda);
        for i in 0..n {
            for eps in [1e-4, -1e-4] {
                let mut probe = fit.x_hat.clone();
                probe[i] += eps;
                let g = objective(&a, &y, &probe, lambda);
                prop_assert!(f <= g + 1e-8 * f.abs().max(1e-12), "coordinate {} eps {}: {} > {}", i, eps, f, g);
            }
        }
        prop_assert!(fit.active_count() <= m);
    }
}
