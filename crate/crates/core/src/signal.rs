//! Synthetic sparse-regression instances: Bernoulli–Gauss signals, random
//! designs from the four ensembles, and Gaussian measurement noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{flat_geometric_params, solve_geometric_params, EnsembleKind, EnsembleSpec};
use crate::error::{ensure, Error, Result};
use crate::rng::{substream, Purpose, SHARED};

/// Each coordinate is zero with probability `1 - rho`, otherwise N(0, 1).
pub fn generate_signal<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> Result<DVector<f64>> {
    ensure(n >= 1, || "signal length must be positive".into())?;
    ensure((0.0..1.0).contains(&rho), || {
        format!("rho must lie in [0, 1), got {rho}")
    })?;
    Ok(DVector::from_iterator(
        n,
        (0..n).map(|_| {
            // draw the normal unconditionally so the stream layout does not depend on rho
            let u: f64 = rng.random();
            let g: f64 = rng.sample(StandardNormal);
            if u < rho {
                g
            } else {
                0.0
            }
        }),
    ))
}

/// `n × k` matrix with orthonormal columns, distributed as the first `k`
/// columns of a Haar orthogonal matrix: Gaussian QR with `R_ii > 0`.
pub fn haar_columns<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= n);
    let g = DMatrix::<f64>::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Rows `rows` of the orthonormal N-point DCT-II matrix,
/// `C[k, j] = √(2/N) c_k cos(π (2j + 1) k / 2N)` with `c_0 = 1/√2`.
pub fn dct_rows(n: usize, rows: &[usize]) -> DMatrix<f64> {
    let period = 4 * n;
    let table: Vec<f64> = (0..period)
        .map(|t| (std::f64::consts::PI * t as f64 / (2 * n) as f64).cos())
        .collect();
    let scale = (2.0 / n as f64).sqrt();
    DMatrix::from_fn(rows.len(), n, |i, j| {
        let k = rows[i];
        let c = if k == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        scale * c * table[((2 * j + 1) * k) % period]
    })
}

pub fn generate_matrix<R: Rng + ?Sized>(spec: &EnsembleSpec, m: usize, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    ensure(m >= 1 && n >= 1, || format!("empty design {m}x{n}"))?;
    ensure(m <= n, || {
        format!("{} needs m <= n, got m={m}, n={n}", spec.kind.name())
    })?;
    ensure((m as f64 / n as f64 - spec.gamma).abs() <= 1.0 / n as f64, || {
        format!("m/n = {m}/{n} inconsistent with gamma = {}", spec.gamma)
    })?;
    let a = match spec.kind {
        EnsembleKind::GaussianIid => {
            let sd = 1.0 / (n as f64).sqrt();
            DMatrix::from_fn(m, n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
        }
        EnsembleKind::RowOrthogonal => haar_columns(n, m, rng).transpose(),
        EnsembleKind::RandomDct => {
            let mut rows = rand::seq::index::sample(rng, n, m).into_vec();
            rows.sort_unstable();
            dct_rows(n, &rows)
        }
        EnsembleKind::Geometric => {
            let kappa = spec.kappa.expect("validated");
            let params = if kappa > 1.0 {
                solve_geometric_params(kappa, spec.gamma, m, n)?
            } else {
                flat_geometric_params(spec.gamma, m, n)
            };
            let mut left = haar_columns(m, m, rng);
            let right = haar_columns(n, m, rng);
            for (mut col, nu) in left.column_iter_mut().zip(&params.singular_values) {
                col *= *nu;
            }
            left * right.transpose()
        }
    };
    Ok(a)
}

/// Draws `xi ~ N(0, sigma2 I)` and returns `(A x0 + xi, xi)`.
pub fn observe<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    x0: &DVector<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if a.ncols() != x0.len() {
        return Err(Error::Shape(format!(
            "design has {} columns but signal has length {}",
            a.ncols(),
            x0.len()
        )));
    }
    ensure(sigma2 >= 0.0 && sigma2.is_finite(), || {
        format!("sigma2 must be >= 0, got {sigma2}")
    })?;
    let sd = sigma2.sqrt();
    let xi = DVector::from_fn(a.nrows(), |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    let y = a * x0 + &xi;
    Ok((y, xi))
}

/// One synthetic regression problem with its ground truth.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub ensemble: EnsembleSpec,
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x0: DVector<f64>,
    pub xi: DVector<f64>,
    pub sigma2: f64,
    pub rho: f64,
}

impl ProblemInstance {
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// Realised measurement ratio M/N.
    pub fn gamma(&self) -> f64 {
        self.m() as f64 / self.n() as f64
    }

    /// Ensemble with gamma replaced by the realised M/N; this is the law the
    /// spectral quantities are evaluated against.
    pub fn effective_ensemble(&self) -> EnsembleSpec {
        self.ensemble.with_gamma(self.gamma()).expect("realised ratio is valid")
    }

    /// Fresh design and noise for a fixed signal.
    pub fn with_signal(
        ensemble: &EnsembleSpec,
        x0: DVector<f64>,
        rho: f64,
        sigma2: f64,
        master_seed: u64,
        replication: u64,
    ) -> Result<Self> {
        let n = x0.len();
        let m = ensemble.rows_for(n);
        let a = generate_matrix(
            ensemble,
            m,
            n,
            &mut substream(master_seed, replication, Purpose::Matrix),
        )?;
        let (y, xi) = observe(
            &a,
            &x0,
            sigma2,
            &mut substream(master_seed, replication, Purpose::Noise),
        )?;
        Ok(Self {
            ensemble: *ensemble,
            a,
            y,
            x0,
            xi,
            sigma2,
            rho,
        })
    }

    /// Signal, design and noise all drawn from one master seed.
    pub fn generate(ensemble: &EnsembleSpec, n: usize, rho: f64, sigma2: f64, seed: u64) -> Result<Self> {
        let x0 = generate_signal(n, rho, &mut substream(seed, SHARED, Purpose::Signal))?;
        Self::with_signal(ensemble, x0, rho, sigma2, seed, 0)
    }
}

/// Sidecar metadata persisted alongside an instance's CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub ensemble: EnsembleSpec,
    pub seed: u64,
    pub sigma2: f64,
    pub rho: f64,
    pub m: usize,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_density_signal() {
        let x = generate_signal(5, 0.0, &mut rng(1)).unwrap();
        assert_eq!(x.as_slice(), &[0.0; 5]);
    }

    #[test]
    fn signal_statistics() {
        let x = generate_signal(100_000, 0.1, &mut rng(2)).unwrap();
        let nz: Vec<f64> = x.iter().copied().filter(|v| *v != 0.0).collect();
        let frac = nz.len() as f64 / 1e5;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let var = nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nz.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn invalid_rho() {
        assert!(generate_signal(3, 1.0, &mut rng(0)).is_err());
        assert!(generate_signal(3, -0.1, &mut rng(0)).is_err());
    }

    fn gram_identity_error(a: &DMatrix<f64>) -> f64 {
        let g = a.transpose() * a;
        (g - DMatrix::identity(a.ncols(), a.ncols())).amax()
    }

    #[test]
    fn square_row_orthogonal_is_orthogonal() {
        let spec = EnsembleSpec::row_orthogonal(1.0).unwrap();
        let a = generate_matrix(&spec, 40, 40, &mut rng(3)).unwrap();
        assert!(gram_identity_error(&a) < 1e-10);
    }

    #[test]
    fn square_dct_is_orthogonal() {
        let spec = EnsembleSpec::random_dct(1.0).unwrap();
        let a = generate_matrix(&spec, 64, 64, &mut rng(4)).unwrap();
        assert!(gram_identity_error(&a) < 1e-10);
    }

    #[test]
    fn partial_designs_have_orthonormal_rows() {
        for spec in [
            EnsembleSpec::row_orthogonal(0.5).unwrap(),
            EnsembleSpec::random_dct(0.5).unwrap(),
        ] {
            let a = generate_matrix(&spec, 30, 60, &mut rng(5)).unwrap();
            let g = &a * a.transpose();
            assert!((g - DMatrix::identity(30, 30)).amax() < 1e-10);
        }
    }

    #[test]
    fn row_selection_needs_m_le_n() {
        let spec = EnsembleSpec::row_orthogonal(1.0).unwrap();
        assert!(matches!(
            generate_matrix(&spec, 11, 10, &mut rng(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn geometric_singular_values() {
        let spec = EnsembleSpec::geometric(0.8, 8.0).unwrap();
        let a = generate_matrix(&spec, 40, 50, &mut rng(6)).unwrap();
        let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        let params = solve_geometric_params(8.0, 0.8, 40, 50).unwrap();
        for (got, want) in sv.iter().zip(&params.singular_values) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn noiseless_observation() {
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let x0 = DVector::from_vec(vec![2.0]);
        let (y, xi) = observe(&a, &x0, 0.0, &mut rng(0)).unwrap();
        assert_eq!(y[0], 2.0);
        assert_eq!(xi[0], 0.0);
    }

    #[test]
    fn observation_shape_error() {
        let a = DMatrix::zeros(2, 3);
        let x0 = DVector::zeros(4);
        assert!(matches!(observe(&a, &x0, 0.1, &mut rng(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_variance() {
        let m = 100_000;
        let a = DMatrix::zeros(m, 1);
        let x0 = DVector::zeros(1);
        let (_, xi) = observe(&a, &x0, 0.02, &mut rng(9)).unwrap();
        let mean = xi.mean();
        let var = xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((var - 0.02).abs() < 3.0 * (2.0 / m as f64).sqrt() * 0.02, "{var}");
    }

    #[test]
    fn instances_are_reproducible() {
        let spec = EnsembleSpec::gaussian(0.5).unwrap();
        let p = ProblemInstance::generate(&spec, 40, 0.2, 0.01, 11).unwrap();
        let q = ProblemInstance::generate(&spec, 40, 0.2, 0.01, 11).unwrap();
        assert_eq!(p.a, q.a);
        assert_eq!(p.y, q.y);
        assert_eq!(p.x0, q.x0);
    }
}
