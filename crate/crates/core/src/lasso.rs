//! LASSO by cyclic coordinate descent:
//! `argmin_x ½‖y − A x‖² + λ‖x‖₁`.
//!
//! Convergence is judged on the KKT conditions rather than on parameter
//! changes: with `g = Aᵀ(y − A x)`, active coordinates need `g_j = λ sgn(x_j)`
//! and inactive ones `|g_j| ≤ λ`. The reported residual is the largest
//! violation divided by `max(1, λ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Bound on the normalized KKT residual.
    pub tolerance: f64,
    /// Bound on the number of coordinate passes (full or active-set).
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_sweeps: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub x_hat: DVector<f64>,
    pub lambda: f64,
    /// Fraction of coordinates counted as active.
    pub rho_active: f64,
    /// `‖y − A x̂‖² / M`
    pub rss: f64,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn n(&self) -> usize {
        self.x_hat.len()
    }

    pub fn active_threshold(&self) -> f64 {
        active_threshold(&self.x_hat)
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.x_hat[i].abs() > self.active_threshold()
    }

    pub fn active_count(&self) -> usize {
        let t = self.active_threshold();
        self.x_hat.iter().filter(|v| v.abs() > t).count()
    }
}

/// Round-off guard for counting active coordinates; coordinate descent
/// already produces exact zeros.
pub fn active_threshold(x: &DVector<f64>) -> f64 {
    1e-10 * x.amax().max(1.0)
}

/// `½‖y − A x‖² + λ‖x‖₁`
pub fn objective(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (y - a * x).norm_squared() + lambda * x.lp_norm(1)
}

/// Smallest λ with an all-zero solution, `‖Aᵀy‖_∞`.
pub fn lambda_max(a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    (a.tr_mul(y)).amax()
}

/// Active-set passes between full passes.
const ACTIVE_PASSES: usize = 10;
/// Coordinates a single refinement may drop before handing back to descent.
const POLISH_DROPS: usize = 8;

fn sign_pattern(x: &DVector<f64>) -> Vec<i8> {
    x.iter().map(|v| v.partial_cmp(&0.0).map_or(0, |o| o as i8)).collect()
}

fn objective_of(r: &[f64], x: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * dot(r, r) + lambda * x.lp_norm(1)
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Design plus per-column squared norms, reusable along a path.
pub struct CoordinateDescent<'a> {
    a: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    col_sq: Vec<f64>,
    options: SolverOptions,
}

impl<'a> CoordinateDescent<'a> {
    pub fn new(a: &'a DMatrix<f64>, y: &'a DVector<f64>, options: SolverOptions) -> Result<Self> {
        if a.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "design has {} rows but response has length {}",
                a.nrows(),
                y.len()
            )));
        }
        let m = a.nrows();
        let col_sq = a.as_slice().chunks_exact(m.max(1)).map(|c| dot(c, c)).collect();
        Ok(Self { a, y, col_sq, options })
    }

    fn column(&self, j: usize) -> &[f64] {
        let m = self.a.nrows();
        &self.a.as_slice()[j * m..(j + 1) * m]
    }

    fn residual(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut r = self.y.as_slice().to_vec();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(-xj, self.column(j), &mut r);
            }
        }
        r
    }

    fn kkt(&self, x: &DVector<f64>, r: &[f64], lambda: f64) -> f64 {
        let worst = (0..x.len())
            .map(|j| {
                let g = dot(self.column(j), r);
                if x[j] != 0.0 {
                    (g - lambda * x[j].signum()).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max);
        worst / lambda.max(1.0)
    }

    /// One pass over `coords`; returns the largest update on the gradient scale.
    fn pass(&self, coords: impl Iterator<Item = usize>, x: &mut DVector<f64>, r: &mut [f64], lambda: f64) -> f64 {
        let mut biggest: f64 = 0.0;
        for j in coords {
            let cs = self.col_sq[j];
            if cs == 0.0 {
                x[j] = 0.0;
                continue;
            }
            let col = self.column(j);
            let old = x[j];
            let rho = dot(col, r) + cs * old;
            let new = soft(rho, lambda) / cs;
            let delta = new - old;
            if delta != 0.0 {
                axpy(-delta, col, r);
                x[j] = new;
                biggest = biggest.max(delta.abs() * cs);
            }
        }
        biggest
    }

    /// Monotone active-set refinement. On a fixed support and sign pattern
    /// the objective is the quadratic `½‖y − A x‖² + λ sᵀx`; step towards its
    /// minimizer (or along a null direction of the Gram block when singular),
    /// stopping at the first coordinate that would change sign and dropping it.
    fn polish(&self, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let m = self.a.nrows();
        let mut x = x.clone();
        let start: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        if start.is_empty() {
            return x;
        }
        let sub = self.a.select_columns(&start);
        let full_gram = sub.tr_mul(&sub);
        let full_corr = sub.tr_mul(self.y);
        let mut keep: Vec<usize> = (0..start.len()).collect();
        for _ in 0..POLISH_DROPS {
            let k = keep.len();
            if k == 0 {
                break;
            }
            let gram = full_gram.select_rows(&keep).select_columns(&keep);
            let current = DVector::from_iterator(k, keep.iter().map(|&p| x[start[p]]));
            let rhs = DVector::from_iterator(k, keep.iter().map(|&p| full_corr[p] - lambda * x[start[p]].signum()));
            let newton = if k <= m {
                gram.clone().cholesky().map(|c| c.solve(&rhs))
            } else {
                None
            };
            let (direction, full_step) = match newton {
                Some(target) if target.iter().all(|v| v.is_finite()) => (target - &current, true),
                _ => {
                    let eig = gram.symmetric_eigen();
                    let (imin, _) = eig.eigenvalues.argmin();
                    let mut d = eig.eigenvectors.column(imin).into_owned();
                    let slope: f64 = current.iter().zip(d.iter()).map(|(c, di)| c.signum() * di).sum();
                    if slope > 0.0 {
                        d = -d;
                    }
                    (d, false)
                }
            };
            let mut step = if full_step { 1.0 } else { f64::INFINITY };
            let mut hit = None;
            for q in 0..k {
                let (xq, dq) = (current[q], direction[q]);
                if xq * dq < 0.0 {
                    let t = -xq / dq;
                    if t <= step {
                        step = t;
                        hit = Some(q);
                    }
                }
            }
            if !step.is_finite() {
                break;
            }
            for q in 0..k {
                x[start[keep[q]]] = current[q] + step * direction[q];
            }
            match hit {
                Some(q) => {
                    x[start[keep[q]]] = 0.0;
                    keep.remove(q);
                }
                None => break,
            }
        }
        x
    }

    pub fn fit(&self, lambda: f64, warm_start: Option<&DVector<f64>>) -> Result<LassoFit> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
        }
        let n = self.a.ncols();
        let mut x = match warm_start {
            Some(w) if w.len() == n => w.clone(),
            Some(w) => {
                return Err(Error::Shape(format!(
                    "warm start has length {} but design has {n} columns",
                    w.len()
                )))
            }
            None => DVector::zeros(n),
        };
        let tol = self.options.tolerance;
        let scale = lambda.max(1.0);
        let mut r = self.residual(&x);
        let mut kkt = self.kkt(&x, &r, lambda);
        let mut sweeps = 0;
        let mut last_pattern = None;
        while kkt >= tol {
            if sweeps >= self.options.max_sweeps {
                return Err(Error::NonConvergence {
                    what: "lasso coordinate descent",
                    iterations: sweeps,
                    residual: kkt,
                });
            }
            self.pass(0..n, &mut x, &mut r, lambda);
            sweeps += 1;
            let round_start = sweeps;
            for _ in 0..ACTIVE_PASSES {
                let active: Vec<usize> = (0..n).filter(|&j| x[j] != 0.0).collect();
                let biggest = self.pass(active.into_iter(), &mut x, &mut r, lambda);
                sweeps += 1;
                if biggest < 0.1 * tol * scale {
                    break;
                }
            }
            r = self.residual(&x);
            let previous = kkt;
            kkt = self.kkt(&x, &r, lambda);
            let pattern = sign_pattern(&x);
            // Refinement costs roughly one active pass per support element;
            // use it when the observed descent rate predicts more passes than that.
            let support = pattern.iter().filter(|s| **s != 0).count();
            let per_pass = (kkt / previous).powf(1.0 / (sweeps - round_start + 1) as f64);
            let remaining = if per_pass < 1.0 {
                (tol / kkt).ln() / per_pass.ln()
            } else {
                f64::INFINITY
            };
            if kkt >= tol && remaining > support as f64 && last_pattern.as_ref() == Some(&pattern) {
                let polished = self.polish(&x, lambda);
                let rp = self.residual(&polished);
                if objective_of(&rp, &polished, lambda) <= objective_of(&r, &x, lambda) {
                    kkt = self.kkt(&polished, &rp, lambda);
                    x = polished;
                    r = rp;
                }
            }
            last_pattern = Some(pattern);
        }
        let m = self.a.nrows();
        let threshold = active_threshold(&x);
        let active = x.iter().filter(|v| v.abs() > threshold).count();
        Ok(LassoFit {
            rho_active: active as f64 / n as f64,
            rss: dot(&r, &r) / m as f64,
            kkt_residual: kkt,
            lambda,
            x_hat: x,
            sweeps,
        })
    }
}

pub fn fit_lasso(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, options: &SolverOptions) -> Result<LassoFit> {
    CoordinateDescent::new(a, y, *options)?.fit(lambda, None)
}

/// Warm-started fits along a strictly decreasing λ sequence.
pub fn fit_path(a: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64], options: &SolverOptions) -> Result<Vec<LassoFit>> {
    if lambdas.is_empty() {
        return Err(Error::Parameter("empty lambda path".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Parameter("lambda path must be strictly decreasing".into()));
    }
    let cd = CoordinateDescent::new(a, y, *options)?;
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let fit = cd.fit(lambda, fits.last().map(|f| &f.x_hat))?;
        fits.push(fit);
    }
    Ok(fits)
}
