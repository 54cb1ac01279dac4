//! De-biasing and uncertainty quantification from a LASSO fit.
//!
//! The local fields `h = Q̂ x̂ + Aᵀ(y − A x̂)` are approximately
//! `N(Q̂ x₀ᵢ, χ̂)` coordinatewise, and `x̂ᵢ = ST_{λ,Q̂}(hᵢ)`. Everything here
//! is a pointwise transform of `h` given `(Q̂, χ̂)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::lasso::LassoFit;
use crate::normal;
use crate::spectral::{spectral_state, SpectralState};
use crate::util::float;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub h: DVector<f64>,
    pub x_debiased: DVector<f64>,
    pub chi_hat: f64,
    pub q_hat: f64,
    pub ci_lo: DVector<f64>,
    pub ci_hi: DVector<f64>,
    pub p_values: DVector<f64>,
    pub alpha_sig: f64,
}

impl InferenceResult {
    /// Common width of every confidence interval.
    pub fn ci_width(&self) -> f64 {
        2.0 * normal::quantile(1.0 - self.alpha_sig / 2.0) * self.chi_hat.sqrt() / self.q_hat
    }

    /// `(hᵢ − Q̂ x₀ᵢ) / √χ̂`, standard normal when the construction is calibrated.
    pub fn standardized_fields(&self, x0: &DVector<f64>) -> DVector<f64> {
        let sd = self.chi_hat.sqrt();
        self.h.zip_map(x0, |h, x| (h - self.q_hat * x) / sd)
    }

    pub fn covers(&self, i: usize, value: f64) -> bool {
        self.ci_lo[i] <= value && value <= self.ci_hi[i]
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

/// `h = Q̂ x̂ + Aᵀ(y − A x̂)`
pub fn local_fields(fit: &LassoFit, a: &DMatrix<f64>, y: &DVector<f64>, q_hat: f64) -> Result<DVector<f64>> {
    positive("q_hat", q_hat)?;
    if a.nrows() != y.len() || a.ncols() != fit.x_hat.len() {
        return Err(Error::Shape(format!(
            "design {}x{} incompatible with response {} and fit {}",
            a.nrows(),
            a.ncols(),
            y.len(),
            fit.x_hat.len()
        )));
    }
    let residual = y - a * &fit.x_hat;
    Ok(a.tr_mul(&residual) + &fit.x_hat * q_hat)
}

/// `ST_{λ,Q̂}(h) = (h − λ sgn h) / Q̂` if `|h| > λ`, else 0.
pub fn soft_threshold(h: f64, lambda: f64, q_hat: f64) -> f64 {
    if h.abs() > lambda {
        (h - lambda * h.signum()) / q_hat
    } else {
        0.0
    }
}

pub fn debias(h: &DVector<f64>, q_hat: f64) -> DVector<f64> {
    h / q_hat
}

/// Two-sided p-values `2 (1 − Φ(|hᵢ| / √χ̂))` for `H₀: x₀ᵢ = 0`.
pub fn p_values(h: &DVector<f64>, chi_hat: f64) -> Result<DVector<f64>> {
    positive("chi_hat", chi_hat)?;
    let sd = chi_hat.sqrt();
    Ok(h.map(|v| normal::two_sided_tail(v / sd)))
}

/// `hᵢ/Q̂ ∓ Φ⁻¹(1 − α/2) √χ̂ / Q̂`
pub fn confidence_intervals(
    h: &DVector<f64>,
    q_hat: f64,
    chi_hat: f64,
    alpha_sig: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    positive("q_hat", q_hat)?;
    positive("chi_hat", chi_hat)?;
    if !(alpha_sig > 0.0 && alpha_sig < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha_sig}")));
    }
    let half = normal::quantile(1.0 - alpha_sig / 2.0) * chi_hat.sqrt() / q_hat;
    let centre = debias(h, q_hat);
    Ok((centre.add_scalar(-half), centre.add_scalar(half)))
}

/// Full construction for one fit: spectral state at the fit's active
/// density, χ̂ from its RSS and the supplied noise level, then the fields,
/// estimates, intervals and p-values.
pub fn infer(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    fit: &LassoFit,
    ensemble: &EnsembleSpec,
    sigma2: f64,
    alpha_sig: f64,
) -> Result<(SpectralState, InferenceResult)> {
    let state = spectral_state(ensemble, fit.rho_active)?.with_chi_hat(ensemble.gamma, fit.rss, sigma2)?;
    let chi_hat = state.chi_hat.expect("just set");
    let h = local_fields(fit, a, y, state.q_hat)?;
    let (ci_lo, ci_hi) = confidence_intervals(&h, state.q_hat, chi_hat, alpha_sig)?;
    let p = p_values(&h, chi_hat)?;
    let result = InferenceResult {
        x_debiased: debias(&h, state.q_hat),
        h,
        chi_hat,
        q_hat: state.q_hat,
        ci_lo,
        ci_hi,
        p_values: p,
        alpha_sig,
    };
    Ok((state, result))
}

/// Rejections at one significance level and the resulting error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub reject: Vec<bool>,
    pub alpha_tilde: f64,
    /// NaN when `x₀` has no zero entries; see `fpr_defined`.
    #[serde(with = "float")]
    pub fpr: f64,
    /// NaN when `x₀` has no nonzero entries; see `tpr_defined`.
    #[serde(with = "float")]
    pub tpr: f64,
    pub fpr_defined: bool,
    pub tpr_defined: bool,
}

/// Counts behind a false/true positive rate pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCounts {
    pub false_pos: usize,
    pub nulls: usize,
    pub true_pos: usize,
    pub signals: usize,
}

impl RateCounts {
    pub fn tally(positive: impl Iterator<Item = bool>, x0: &DVector<f64>) -> Self {
        let mut c = RateCounts::default();
        for (pos, &truth) in positive.zip(x0.iter()) {
            if truth == 0.0 {
                c.nulls += 1;
                c.false_pos += pos as usize;
            } else {
                c.signals += 1;
                c.true_pos += pos as usize;
            }
        }
        c
    }

    pub fn fpr(&self) -> f64 {
        if self.nulls == 0 {
            f64::NAN
        } else {
            self.false_pos as f64 / self.nulls as f64
        }
    }

    pub fn tpr(&self) -> f64 {
        if self.signals == 0 {
            f64::NAN
        } else {
            self.true_pos as f64 / self.signals as f64
        }
    }

    pub fn merge(&mut self, other: &RateCounts) {
        self.false_pos += other.false_pos;
        self.nulls += other.nulls;
        self.true_pos += other.true_pos;
        self.signals += other.signals;
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("length {a} does not match signal length {b}")))
    }
}

/// Rejects `H₀,ᵢ` when `Pᵢ ≤ α̃`; a level of exactly zero rejects nothing.
pub fn hypothesis_test(p_values: &DVector<f64>, alpha_tilde: f64, x0: &DVector<f64>) -> Result<TestOutcome> {
    check_lengths(p_values.len(), x0.len())?;
    if !(0.0..=1.0).contains(&alpha_tilde) {
        return Err(Error::Parameter(format!(
            "significance level must lie in [0, 1], got {alpha_tilde}"
        )));
    }
    let reject: Vec<bool> = p_values
        .iter()
        .map(|&p| alpha_tilde > 0.0 && p <= alpha_tilde)
        .collect();
    let counts = RateCounts::tally(reject.iter().copied(), x0);
    Ok(TestOutcome {
        reject,
        alpha_tilde,
        fpr: counts.fpr(),
        tpr: counts.tpr(),
        fpr_defined: counts.nulls > 0,
        tpr_defined: counts.signals > 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Significance level, or λ for LASSO support curves.
    pub parameter: f64,
    #[serde(with = "float")]
    pub fpr: f64,
    #[serde(with = "float")]
    pub tpr: f64,
}

/// Test-based ROC: one point per significance level.
pub fn roc_curve(p_values: &DVector<f64>, x0: &DVector<f64>, alphas: &[f64]) -> Result<Vec<RocPoint>> {
    if alphas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Parameter("significance levels must be ascending".into()));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::Parameter("significance levels must lie in (0, 1)".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let t = hypothesis_test(p_values, alpha, x0)?;
            Ok(RocPoint {
                parameter: alpha,
                fpr: t.fpr,
                tpr: t.tpr,
            })
        })
        .collect()
}

/// Support-based ROC of a LASSO path: coordinate i is called positive iff active.
pub fn lasso_roc(path: &[LassoFit], x0: &DVector<f64>) -> Result<Vec<RocPoint>> {
    if path.is_empty() {
        return Err(Error::Parameter("empty LASSO path".into()));
    }
    path.iter()
        .map(|fit| {
            check_lengths(fit.n(), x0.len())?;
            let counts = RateCounts::tally((0..fit.n()).map(|i| fit.is_active(i)), x0);
            Ok(RocPoint {
                parameter: fit.lambda,
                fpr: counts.fpr(),
                tpr: counts.tpr(),
            })
        })
        .collect()
}
