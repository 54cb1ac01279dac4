//! Macroscopic spectral quantities of the design Gram matrix J = AᵀA.
//!
//! Given the active density ϱ_active of a LASSO fit, the construction is
//!
//! 1. solve `z = (1 − ϱ_active) / S_J(z)` for `z = z(−χ)` below the support,
//! 2. `χ = −S_J(z)` and `z′(−χ) = −[∫ ρ_J(λ) / (z − λ)² dλ]⁻¹`,
//! 3. `G′ = (z + 1/χ) / 2`, `G″ = (z′ + 1/χ²) / 2`, `Q̂ = 2G′ = z + 1/χ`,
//!
//! and, once the residual sum of squares and a noise level are known,
//! the local-field variance χ̂ (see [`chi_hat`]).
//!
//! The Gaussian and row-orthogonal (hence random-DCT) families also have
//! closed forms; [`spectral_state`] uses them and [`spectral_state_generic`]
//! is the density-only path they are checked against.

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleKind, EnsembleSpec, SpectralDensity};
use crate::error::{Error, Result};
use crate::util::float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub rho_active: f64,
    pub chi: f64,
    /// z(−χ); −∞ for an empty active set.
    #[serde(with = "float")]
    pub z: f64,
    /// z′(−χ); −∞ for an empty active set.
    #[serde(with = "float")]
    pub z_prime: f64,
    /// G′(−χ; J)
    pub g1: f64,
    /// G″(−χ; J)
    pub g2: f64,
    /// Onsager coefficient Q̂ = Λ = 2G′.
    pub q_hat: f64,
    /// Local-field variance, filled in by [`SpectralState::with_chi_hat`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_hat: Option<f64>,
}

impl SpectralState {
    pub fn with_chi_hat(mut self, gamma: f64, rss: f64, sigma2: f64) -> Result<Self> {
        self.chi_hat = Some(chi_hat(&self, gamma, rss, sigma2)?);
        Ok(self)
    }

    pub fn from_z(rho_active: f64, z: f64, chi: f64, z_prime: f64) -> Self {
        let g1 = 0.5 * (z + 1.0 / chi);
        let g2 = 0.5 * (z_prime + 1.0 / (chi * chi));
        Self {
            rho_active,
            chi,
            z,
            z_prime,
            g1,
            g2,
            q_hat: 2.0 * g1,
            chi_hat: None,
        }
    }

    /// Empty active set: χ = 0 and z → −∞. The R-transform expansion
    /// `R(x) = m₁ + (m₂ − m₁²) x + …` gives `G′ = m₁/2`, `G″ = (m₂ − m₁²)/2`.
    pub fn empty_support(density: &SpectralDensity) -> Self {
        let m1 = density.moment(1);
        let m2 = density.moment(2);
        Self {
            rho_active: 0.0,
            chi: 0.0,
            z: f64::NEG_INFINITY,
            z_prime: f64::NEG_INFINITY,
            g1: 0.5 * m1,
            g2: 0.5 * (m2 - m1 * m1),
            q_hat: m1,
            chi_hat: None,
        }
    }
}

fn check_below_support(density: &SpectralDensity, z: f64) -> Result<()> {
    let edge = density.lower_edge();
    if z < edge && z.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { z, edge })
    }
}

/// Stieltjes transform `S(z) = ∫ ρ(λ) / (z − λ) dλ` for real z below the support.
pub fn stieltjes(density: &SpectralDensity, z: f64) -> Result<f64> {
    check_below_support(density, z)?;
    Ok(density.resolvent(z, 1))
}

/// `z′ = −[∫ ρ(λ) / (z − λ)² dλ]⁻¹`, the derivative of the inverse Stieltjes map.
pub fn z_derivative(density: &SpectralDensity, z: f64) -> Result<f64> {
    check_below_support(density, z)?;
    Ok(-1.0 / density.resolvent(z, 2))
}

/// Mass of the density away from zero; the largest attainable active density.
pub fn nonzero_mass(density: &SpectralDensity) -> f64 {
    let zero_atom: f64 = density
        .atoms
        .iter()
        .filter(|a| a.location == 0.0)
        .map(|a| a.weight)
        .sum();
    density.total_mass() - zero_atom
}

const FIXED_POINT_DAMPING: f64 = 0.5;
const RESIDUAL_TOL: f64 = 1e-12;

/// Solves `z S(z) = 1 − ϱ_active` for the unique z below the support.
///
/// `z S(z) = 1 − ∫ λ ρ(λ) / (λ − z) dλ` decreases strictly from 1 at −∞ to
/// `1 − γ` at a zero lower edge, so a root exists iff `0 < ϱ_active < γ`.
/// A damped fixed-point iteration seeded by the Gaussian closed form gets
/// close; a bracketed Newton/bisection step polishes to round-off.
pub fn solve_z(density: &SpectralDensity, rho_active: f64) -> Result<f64> {
    let gamma = nonzero_mass(density);
    if !(rho_active > 0.0) {
        return Err(Error::Parameter(format!(
            "active density must be positive, got {rho_active}"
        )));
    }
    if rho_active >= gamma {
        return Err(Error::Infeasible { rho_active, gamma });
    }
    let edge = density.lower_edge();
    let target = 1.0 - rho_active;
    let residual = |z: f64| z * density.resolvent(z, 1) - target;

    // bracket [lo, hi] with residual(lo) > 0 > residual(hi)
    let scale = density.upper_edge().abs().max(1.0);
    let mut hi = edge - 1e-12 * scale;
    let mut shrink = 1e-12;
    while residual(hi) >= 0.0 {
        shrink *= 10.0;
        if shrink > 1.0 {
            return Err(Error::NonConvergence {
                what: "z bracket (upper)",
                iterations: 0,
                residual: residual(hi),
            });
        }
        hi = edge - shrink * scale;
    }
    let mut lo = edge - 1e3 * scale;
    let mut expansions = 0;
    while residual(lo) <= 0.0 {
        lo = edge - 10.0 * (edge - lo);
        expansions += 1;
        if expansions > 60 {
            return Err(Error::NonConvergence {
                what: "z bracket (lower)",
                iterations: expansions,
                residual: residual(lo),
            });
        }
    }

    // damped fixed point from the Marchenko–Pastur guess
    let q = gamma - rho_active;
    let mut z = q - q / rho_active;
    if !(z > lo && z < hi) {
        z = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let s = density.resolvent(z, 1);
        let next = (1.0 - FIXED_POINT_DAMPING) * z + FIXED_POINT_DAMPING * target / s;
        if !(next > lo && next < hi) {
            break;
        }
        z = next;
        if residual(z).abs() < 1e-8 {
            break;
        }
    }

    // safeguarded Newton; f'(z) = S(z) − z ∫ ρ / (z − λ)²
    let mut last = f64::NAN;
    for it in 0..300 {
        let s = density.resolvent(z, 1);
        let f = z * s - target;
        last = f;
        if f > 0.0 {
            lo = lo.max(z);
        } else if f < 0.0 {
            hi = hi.min(z);
        } else {
            return Ok(z);
        }
        let slope = s - z * density.resolvent(z, 2);
        let mut next = z - f / slope;
        if !(next > lo && next < hi) || !slope.is_finite() || slope == 0.0 {
            next = 0.5 * (lo + hi);
        }
        let step = (next - z).abs();
        z = next;
        if step <= 2.0 * f64::EPSILON * z.abs().max(1e-300) || hi - lo <= 2.0 * f64::EPSILON * z.abs() {
            let f = residual(z);
            if f.abs() < RESIDUAL_TOL {
                return Ok(z);
            }
            return Err(Error::NonConvergence {
                what: "z(-chi) solve",
                iterations: it + 1,
                residual: f,
            });
        }
    }
    if last.abs() < RESIDUAL_TOL {
        return Ok(z);
    }
    Err(Error::NonConvergence {
        what: "z(-chi) solve",
        iterations: 300,
        residual: last,
    })
}

/// Spectral state from the density alone.
pub fn spectral_state_generic(density: &SpectralDensity, rho_active: f64) -> Result<SpectralState> {
    if rho_active == 0.0 {
        return Ok(SpectralState::empty_support(density));
    }
    let z = solve_z(density, rho_active)?;
    let chi = -stieltjes(density, z)?;
    let z_prime = z_derivative(density, z)?;
    Ok(SpectralState::from_z(rho_active, z, chi, z_prime))
}

/// Closed forms for the Gaussian and row-orthogonal laws, `None` otherwise.
pub fn spectral_state_closed_form(spec: &EnsembleSpec, rho_active: f64) -> Option<Result<SpectralState>> {
    let gamma = spec.gamma;
    let check = || -> Result<()> {
        if !(rho_active > 0.0) {
            return Err(Error::Parameter(format!(
                "active density must be positive, got {rho_active}"
            )));
        }
        if rho_active >= gamma {
            return Err(Error::Infeasible { rho_active, gamma });
        }
        Ok(())
    };
    match spec.kind {
        EnsembleKind::GaussianIid => Some(check().map(|()| {
            let q_hat = gamma - rho_active;
            let chi = rho_active / q_hat;
            let g1 = 0.5 * gamma / (1.0 + chi);
            let g2 = 0.5 * gamma / (1.0 + chi).powi(2);
            SpectralState {
                rho_active,
                chi,
                z: q_hat - 1.0 / chi,
                z_prime: 2.0 * g2 - 1.0 / (chi * chi),
                g1,
                g2,
                q_hat,
                chi_hat: None,
            }
        })),
        EnsembleKind::RowOrthogonal | EnsembleKind::RandomDct => Some(check().map(|()| {
            let chi = rho_active * (1.0 - rho_active) / (gamma - rho_active);
            let root = ((chi + 1.0).powi(2) - 4.0 * gamma * chi).sqrt();
            let z = -(1.0 - chi + root) / (2.0 * chi);
            let z_prime = -(1.0 - 2.0 * gamma * chi + chi + root) / (2.0 * chi * chi * root);
            let mut state = SpectralState::from_z(rho_active, z, chi, z_prime);
            // exact form of Q̂; equals z + 1/χ up to round-off
            state.q_hat = (gamma - rho_active) / (1.0 - rho_active);
            state.g1 = 0.5 * state.q_hat;
            state
        })),
        EnsembleKind::Geometric => None,
    }
}

/// Spectral state of an ensemble at the given active density.
pub fn spectral_state(spec: &EnsembleSpec, rho_active: f64) -> Result<SpectralState> {
    let density = spec.density();
    if rho_active == 0.0 {
        return Ok(SpectralState::empty_support(&density));
    }
    match spectral_state_closed_form(spec, rho_active) {
        Some(state) => state,
        None => spectral_state_generic(&density, rho_active),
    }
}

/// Local-field variance
/// `χ̂ = γG″/(G′ − G″χ)·RSS + (2G′² − γG″)/(G′ − G″χ)·σ²`.
pub fn chi_hat(state: &SpectralState, gamma: f64, rss: f64, sigma2: f64) -> Result<f64> {
    if !(rss >= 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::Parameter(format!(
            "rss and sigma2 must be non-negative, got {rss}, {sigma2}"
        )));
    }
    let denom = state.g1 - state.g2 * state.chi;
    if !(denom > 0.0) {
        return Err(Error::Numeric(format!(
            "G' - G''chi = {denom} is not positive (chi = {}, G' = {}, G'' = {})",
            state.chi, state.g1, state.g2
        )));
    }
    let rss_coef = gamma * state.g2 / denom;
    let noise_coef = (2.0 * state.g1 * state.g1 - gamma * state.g2) / denom;
    Ok(rss_coef * rss + noise_coef * sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn point_mass_stieltjes() {
        let d = SpectralDensity::point_mass(1.0);
        assert_eq!(stieltjes(&d, -1.0).unwrap(), -0.5);
        assert_eq!(z_derivative(&d, -1.0).unwrap(), -4.0);
    }

    #[test]
    fn domain_errors() {
        let d = EnsembleSpec::gaussian(0.5).unwrap().density();
        assert!(matches!(stieltjes(&d, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(stieltjes(&d, 1.0), Err(Error::Domain { .. })));
        assert!(matches!(z_derivative(&d, 0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn gaussian_example() {
        let spec = EnsembleSpec::gaussian(0.5).unwrap();
        let s = spectral_state(&spec, 0.25).unwrap();
        assert!(close(s.chi, 1.0, 1e-14));
        assert!(close(s.q_hat, 0.25, 1e-14));
        assert!(close(s.g1, 0.125, 1e-14));
        assert!(close(s.g2, 0.0625, 1e-14));
        let z = solve_z(&spec.density(), 0.25).unwrap();
        assert!(close(z, -0.75, 1e-12));
    }

    #[test]
    fn row_orthogonal_example() {
        let spec = EnsembleSpec::row_orthogonal(0.5).unwrap();
        let s = spectral_state(&spec, 0.25).unwrap();
        assert!(close(s.chi, 0.75, 1e-14));
        assert!(close(s.q_hat, 1.0 / 3.0, 1e-14));
        assert!(close(s.z, -1.0, 1e-14));
        let z = solve_z(&spec.density(), 0.25).unwrap();
        assert!(close(z, -1.0, 1e-13));
    }

    #[test]
    fn infeasible_active_density() {
        let d = EnsembleSpec::gaussian(0.5).unwrap().density();
        assert!(matches!(solve_z(&d, 0.5), Err(Error::Infeasible { .. })));
        assert!(matches!(solve_z(&d, 0.7), Err(Error::Infeasible { .. })));
        let spec = EnsembleSpec::row_orthogonal(0.5).unwrap();
        assert!(matches!(spectral_state(&spec, 0.5), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn saturation_blows_up_chi() {
        let d = EnsembleSpec::gaussian(0.5).unwrap().density();
        let z = solve_z(&d, 0.5 - 1e-6).unwrap();
        assert!(z < 0.0 && z > -1e-5, "{z}");
        let s = spectral_state_generic(&d, 0.5 - 1e-6).unwrap();
        assert!(s.chi > 1e5);
    }

    #[test]
    fn empty_support_limit() {
        let spec = EnsembleSpec::gaussian(0.5).unwrap();
        let empty = spectral_state(&spec, 0.0).unwrap();
        assert_eq!(empty.chi, 0.0);
        assert!(close(empty.q_hat, 0.5, 1e-15));
        // continuity with small positive densities
        // G'' = (z' + 1/chi^2)/2 cancels catastrophically as chi -> 0, so stay at 1e-4
        let tiny = spectral_state_generic(&spec.density(), 1e-4).unwrap();
        assert!(close(tiny.q_hat, empty.q_hat, 1e-3));
        assert!(close(tiny.g2, empty.g2, 1e-3), "{} {}", tiny.g2, empty.g2);
        let geo = EnsembleSpec::geometric(0.8, 8.0).unwrap();
        let empty = spectral_state(&geo, 0.0).unwrap();
        let tiny = spectral_state(&geo, 1e-4).unwrap();
        assert!(close(tiny.q_hat, empty.q_hat, 1e-3));
        assert!(close(tiny.g2, empty.g2, 1e-2), "{} {}", tiny.g2, empty.g2);
    }

    #[test]
    fn gaussian_chi_hat_ignores_noise() {
        let spec = EnsembleSpec::gaussian(0.5).unwrap();
        for rho in [0.05, 0.25, 0.4] {
            let s = spectral_state(&spec, rho).unwrap();
            for sigma2 in [0.0, 0.02, 1.0] {
                let v = chi_hat(&s, 0.5, 0.04, sigma2).unwrap();
                assert!((v - 0.02).abs() < 1e-15, "{v}");
            }
        }
    }

    #[test]
    fn chi_hat_zero() {
        let s = spectral_state(&EnsembleSpec::row_orthogonal(0.5).unwrap(), 0.1).unwrap();
        assert_eq!(chi_hat(&s, 0.5, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn chi_hat_rejects_bad_denominator() {
        let mut s = spectral_state(&EnsembleSpec::gaussian(0.5).unwrap(), 0.1).unwrap();
        s.g2 = s.g1 / s.chi * 2.0;
        assert!(matches!(chi_hat(&s, 0.5, 0.1, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn row_orthogonal_chi_hat_value() {
        // G' = 1/6, G'' = 4/45, denominator 1/10 at gamma = 1/2, rho_active = 1/4
        let s = spectral_state(&EnsembleSpec::row_orthogonal(0.5).unwrap(), 0.25).unwrap();
        let v = chi_hat(&s, 0.5, 0.1, 0.02).unwrap();
        assert!((v - (4.0 / 9.0 * 0.1 + 0.02 / 9.0)).abs() < 1e-14);
    }
}
