//! Standard normal CDF, tail and quantile.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::SQRT_2;

/// Φ(x)
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Two-sided tail `2 (1 − Φ(|x|))`, evaluated without cancellation.
pub fn two_sided_tail(x: f64) -> f64 {
    erfc(x.abs() / SQRT_2)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument {p} outside (0, 1)");
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and N(0, 1).
pub fn ks_distance(samples: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}
