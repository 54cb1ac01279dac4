//! Random design ensembles and their limiting eigenvalue laws.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::quadrature::GaussKronrod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    GaussianIid,
    RowOrthogonal,
    RandomDct,
    Geometric,
}

impl EnsembleKind {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleKind::GaussianIid => "gaussian-iid",
            EnsembleKind::RowOrthogonal => "row-orthogonal",
            EnsembleKind::RandomDct => "random-dct",
            EnsembleKind::Geometric => "geometric",
        }
    }
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-iid" | "gaussian" => Ok(EnsembleKind::GaussianIid),
            "row-orthogonal" => Ok(EnsembleKind::RowOrthogonal),
            "random-dct" | "dct" => Ok(EnsembleKind::RandomDct),
            "geometric" => Ok(EnsembleKind::Geometric),
            other => Err(Error::Parameter(format!("unknown ensemble '{other}'"))),
        }
    }
}

/// Which random-matrix family a design is drawn from.
///
/// `gamma` is the measurement ratio M/N. `kappa` is the peak-to-average
/// eigenvalue ratio and is only meaningful for the geometric family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

impl EnsembleSpec {
    pub fn new(kind: EnsembleKind, gamma: f64, kappa: Option<f64>) -> Result<Self> {
        let spec = Self { kind, gamma, kappa };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(gamma: f64) -> Result<Self> {
        Self::new(EnsembleKind::GaussianIid, gamma, None)
    }

    pub fn row_orthogonal(gamma: f64) -> Result<Self> {
        Self::new(EnsembleKind::RowOrthogonal, gamma, None)
    }

    pub fn random_dct(gamma: f64) -> Result<Self> {
        Self::new(EnsembleKind::RandomDct, gamma, None)
    }

    pub fn geometric(gamma: f64, kappa: f64) -> Result<Self> {
        Self::new(EnsembleKind::Geometric, gamma, Some(kappa))
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.gamma > 0.0 && self.gamma <= 1.0, || {
            format!("gamma must lie in (0, 1], got {}", self.gamma)
        })?;
        match (self.kind, self.kappa) {
            (EnsembleKind::Geometric, Some(k)) => {
                ensure(k >= 1.0 && k.is_finite(), || format!("kappa must be >= 1, got {k}"))
            }
            (EnsembleKind::Geometric, None) => Err(Error::Parameter("geometric ensemble requires kappa".into())),
            (kind, Some(_)) => Err(Error::Parameter(format!(
                "kappa is only valid for the geometric ensemble, not {}",
                kind.name()
            ))),
            (_, None) => Ok(()),
        }
    }

    /// Same family with the measurement ratio replaced by the realised M/N.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.kind, gamma, self.kappa)
    }

    /// Number of rows for an N-column design, `round(gamma * n)`.
    pub fn rows_for(&self, n: usize) -> usize {
        ((self.gamma * n as f64).round() as usize).max(1)
    }

    /// Limiting eigenvalue distribution of AᵀA.
    pub fn density(&self) -> SpectralDensity {
        let gamma = self.gamma;
        let mut atoms = Vec::new();
        if gamma < 1.0 {
            atoms.push(Atom {
                location: 0.0,
                weight: 1.0 - gamma,
            });
        }
        match self.kind {
            EnsembleKind::GaussianIid => SpectralDensity {
                atoms,
                continuous: Some(Continuous::MarchenkoPastur { gamma }),
            },
            EnsembleKind::RowOrthogonal | EnsembleKind::RandomDct => {
                atoms.push(Atom {
                    location: 1.0,
                    weight: gamma,
                });
                SpectralDensity {
                    atoms,
                    continuous: None,
                }
            }
            EnsembleKind::Geometric => {
                let kappa = self.kappa.unwrap_or(1.0);
                let upper = kappa / gamma;
                if kappa <= 1.0 {
                    // eta -> 0: the log-uniform part collapses onto B = 1/gamma
                    atoms.push(Atom {
                        location: upper,
                        weight: gamma,
                    });
                    SpectralDensity {
                        atoms,
                        continuous: None,
                    }
                } else {
                    SpectralDensity {
                        atoms,
                        continuous: Some(Continuous::LogUniform {
                            gamma,
                            eta: eta_for_kappa(kappa),
                            upper,
                        }),
                    }
                }
            }
        }
    }
}

/// Peak-to-average ratio as a function of the log-range `eta`.
pub fn kappa_of_eta(eta: f64) -> f64 {
    if eta == 0.0 {
        1.0
    } else {
        eta / -(-eta).exp_m1()
    }
}

/// Inverts `kappa = eta / (1 - e^{-eta})` by bisection; the map is strictly
/// increasing from 1 at eta = 0.
pub fn eta_for_kappa(kappa: f64) -> f64 {
    if kappa <= 1.0 {
        return 0.0;
    }
    // kappa_of_eta(eta) > eta, so eta = kappa brackets from above
    let (mut lo, mut hi) = (0.0_f64, kappa);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kappa_of_eta(mid) < kappa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Singular-value profile of a finite geometric design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub kappa: f64,
    pub eta: f64,
    /// Upper spectral edge B of the limiting law.
    pub upper_edge: f64,
    /// Ratio between consecutive singular values.
    pub tau: f64,
    pub singular_values: Vec<f64>,
}

/// Geometric singular values whose squares span `[B e^{-eta}, B]` before a
/// single common rescaling enforces `(1/N) Σ ν_i² = 1`.
pub fn solve_geometric_params(kappa: f64, gamma: f64, m: usize, n: usize) -> Result<GeometricParams> {
    ensure(kappa > 1.0 && kappa.is_finite(), || {
        format!("kappa must be > 1 (kappa = 1 is the flat spectrum), got {kappa}")
    })?;
    ensure(gamma > 0.0 && gamma <= 1.0, || {
        format!("gamma must lie in (0, 1], got {gamma}")
    })?;
    ensure(m >= 1 && m <= n, || format!("need 1 <= m <= n, got m={m}, n={n}"))?;
    let eta = eta_for_kappa(kappa);
    let upper_edge = kappa / gamma;
    let ratio_sq = if m > 1 { (-eta / (m - 1) as f64).exp() } else { 1.0 };
    let squares: Vec<f64> = (0..m).map(|i| upper_edge * ratio_sq.powi(i as i32)).collect();
    let scale = n as f64 / squares.iter().sum::<f64>();
    Ok(GeometricParams {
        kappa,
        eta,
        upper_edge,
        tau: ratio_sq.sqrt(),
        singular_values: squares.iter().map(|s| (s * scale).sqrt()).collect(),
    })
}

/// Flat profile, the kappa -> 1 limit: all singular values equal sqrt(N/M).
pub fn flat_geometric_params(gamma: f64, m: usize, n: usize) -> GeometricParams {
    GeometricParams {
        kappa: 1.0,
        eta: 0.0,
        upper_edge: 1.0 / gamma,
        tau: 1.0,
        singular_values: vec![(n as f64 / m as f64).sqrt(); m],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: f64,
    pub weight: f64,
}

/// Absolutely continuous part of a limiting eigenvalue law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Continuous {
    /// `(1/2π) √((λ₊ − s)(s − λ₋)) / s` on `[λ₋, λ₊]`, λ± = (1 ± √γ)²; total mass γ.
    MarchenkoPastur { gamma: f64 },
    /// `γ / (η s)` on `(B e^{-η}, B]`; total mass γ.
    LogUniform { gamma: f64, eta: f64, upper: f64 },
}

impl Continuous {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Continuous::MarchenkoPastur { gamma } => {
                let r = gamma.sqrt();
                ((1.0 - r).powi(2), (1.0 + r).powi(2))
            }
            Continuous::LogUniform { eta, upper, .. } => (upper * (-eta).exp(), upper),
        }
    }

    pub fn mass(&self) -> f64 {
        match *self {
            Continuous::MarchenkoPastur { gamma } | Continuous::LogUniform { gamma, .. } => gamma,
        }
    }

    /// `∫ s^k ρ(s) ds` for k = 1, 2.
    pub fn moment(&self, k: u32) -> f64 {
        match (*self, k) {
            (Continuous::MarchenkoPastur { gamma }, 1) => gamma,
            (Continuous::MarchenkoPastur { gamma }, 2) => gamma * (1.0 + gamma),
            (Continuous::LogUniform { gamma, eta, upper }, k) => {
                let lo = upper * (-eta).exp();
                let k = k as i32;
                gamma / eta * (upper.powi(k) - lo.powi(k)) / k as f64
            }
            (_, k) => panic!("moment {k} not available"),
        }
    }

    /// Marchenko–Pastur integrand after `s = λ₋ + w sin²θ`, which removes
    /// the square-root edge behaviour: returns (s, ρ(s) ds/dθ).
    fn mp_substituted(gamma: f64, theta: f64) -> (f64, f64) {
        let r = gamma.sqrt();
        let lo = (1.0 - r).powi(2);
        let width = 4.0 * r;
        let (sin, cos) = theta.sin_cos();
        let s = lo + width * sin * sin;
        // √((λ₊−s)(s−λ₋)) = w sinθ cosθ and ds = 2 w sinθ cosθ dθ
        let jac = width * width * 2.0 * sin * sin * cos * cos / (2.0 * std::f64::consts::PI);
        (s, jac / s)
    }

    /// `∫ ρ(s) / (z − s)^p ds` for p = 1, 2 and z below the support.
    pub fn resolvent(&self, z: f64, p: i32) -> f64 {
        match *self {
            Continuous::MarchenkoPastur { gamma } => {
                let quad = GaussKronrod::with_tolerance(1e-15, 1e-14);
                quad.integrate(
                    |theta| {
                        let (s, w) = Self::mp_substituted(gamma, theta);
                        w / (z - s).powi(p)
                    },
                    0.0,
                    std::f64::consts::FRAC_PI_2,
                )
                .value
            }
            Continuous::LogUniform { gamma, eta, upper } => {
                let lo = upper * (-eta).exp();
                let log_ratio = ((upper - z) / (lo - z)).ln();
                let c = gamma / eta;
                match p {
                    1 => c * (eta - log_ratio) / z,
                    2 => c * ((eta - log_ratio) / (z * z) + (1.0 / (z - upper) - 1.0 / (z - lo)) / z),
                    _ => panic!("resolvent power {p} not available"),
                }
            }
        }
    }

    /// Mass of the continuous part on `(-∞, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return self.mass();
        }
        match *self {
            Continuous::MarchenkoPastur { gamma } => {
                let width = 4.0 * gamma.sqrt();
                let theta_x = ((x - lo) / width).sqrt().min(1.0).asin();
                GaussKronrod::with_tolerance(1e-13, 1e-12)
                    .integrate(|t| Self::mp_substituted(gamma, t).1, 0.0, theta_x)
                    .value
            }
            Continuous::LogUniform { gamma, eta, .. } => gamma / eta * (x / lo).ln(),
        }
    }
}

/// Atoms plus an optional continuous part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDensity {
    pub atoms: Vec<Atom>,
    pub continuous: Option<Continuous>,
}

impl SpectralDensity {
    pub fn point_mass(location: f64) -> Self {
        Self {
            atoms: vec![Atom { location, weight: 1.0 }],
            continuous: None,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum::<f64>() + self.continuous.map_or(0.0, |c| c.mass())
    }

    /// Smallest point of the support.
    pub fn lower_edge(&self) -> f64 {
        let atom_min = self.atoms.iter().map(|a| a.location).fold(f64::INFINITY, f64::min);
        atom_min.min(self.continuous.map_or(f64::INFINITY, |c| c.support().0))
    }

    pub fn upper_edge(&self) -> f64 {
        let atom_max = self.atoms.iter().map(|a| a.location).fold(f64::NEG_INFINITY, f64::max);
        atom_max.max(self.continuous.map_or(f64::NEG_INFINITY, |c| c.support().1))
    }

    pub fn moment(&self, k: u32) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * a.location.powi(k as i32))
            .sum::<f64>()
            + self.continuous.map_or(0.0, |c| c.moment(k))
    }

    /// `∫ ρ(λ) / (z − λ)^p dλ` without a domain check.
    pub(crate) fn resolvent(&self, z: f64, p: i32) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight / (z - a.location).powi(p))
            .sum::<f64>()
            + self.continuous.map_or(0.0, |c| c.resolvent(z, p))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.location <= x)
            .map(|a| a.weight)
            .sum::<f64>()
            + self.continuous.map_or(0.0, |c| c.cdf(x))
    }

    /// Limit of the CDF from the left at `x`.
    pub fn cdf_left(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.location < x)
            .map(|a| a.weight)
            .sum::<f64>()
            + self.continuous.map_or(0.0, |c| c.cdf(x))
    }

    /// Kolmogorov distance between this law and the empirical law of `samples`.
    pub fn kolmogorov_distance(&self, samples: &[f64]) -> f64 {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut worst: f64 = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let x = sorted[i];
            let mut j = i;
            while j < sorted.len() && sorted[j] == x {
                j += 1;
            }
            let below = i as f64 / n;
            let at = j as f64 / n;
            worst = worst
                .max((below - self.cdf_left(x)).abs())
                .max((at - self.cdf(x)).abs());
            i = j;
        }
        worst
    }
}
