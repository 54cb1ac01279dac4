//! CSV and JSON persistence. Floats are written in shortest round-trip form,
//! so re-reading any file reproduces the in-memory values bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::inference::{InferenceResult, TestOutcome};
use crate::lasso::LassoFit;
use crate::signal::{InstanceMeta, ProblemInstance};
use crate::spectral::SpectralState;
use crate::util::float;

/// Shortest representation that parses back to the same bits.
pub fn fmt(v: f64) -> String {
    let mag = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&mag) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn parse(field: &str, path: &Path) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Numeric(format!("{}: cannot parse {field:?} as a number", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Header plus string rows.
pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Header and rows of a CSV file with a header line.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))?;
    Ok((header, rows))
}

/// Matrix as headerless row-major CSV.
pub fn write_matrix(path: &Path, a: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    for row in a.row_iter() {
        w.write_record(row.iter().map(|v| fmt(*v))).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Shape(format!("{}: ragged row {}", path.display(), rows + 1)));
        }
        for field in rec.iter() {
            values.push(parse(field, path)?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

/// Vector as a one-column CSV with a header.
pub fn write_vector(path: &Path, name: &str, v: &DVector<f64>) -> Result<()> {
    write_table(path, &[name], v.iter().map(|x| [fmt(*x)]))
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let (_, rows) = read_table(path)?;
    let values = rows
        .iter()
        .map(|r| match r.as_slice() {
            [field] => parse(field, path),
            _ => Err(Error::Shape(format!("{}: expected one column", path.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(values))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// File names of a persisted instance inside its directory.
pub struct InstanceFiles {
    pub design: PathBuf,
    pub response: PathBuf,
    pub signal: PathBuf,
    pub noise: PathBuf,
    pub meta: PathBuf,
}

impl InstanceFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            design: dir.join("A.csv"),
            response: dir.join("y.csv"),
            signal: dir.join("x0.csv"),
            noise: dir.join("xi.csv"),
            meta: dir.join("instance.json"),
        }
    }
}

pub fn save_instance(dir: &Path, instance: &ProblemInstance, seed: u64) -> Result<()> {
    create_dir(dir)?;
    let files = InstanceFiles::in_dir(dir);
    write_matrix(&files.design, &instance.a)?;
    write_vector(&files.response, "y", &instance.y)?;
    write_vector(&files.signal, "x0", &instance.x0)?;
    write_vector(&files.noise, "xi", &instance.xi)?;
    let meta = InstanceMeta {
        ensemble: instance.ensemble,
        seed,
        sigma2: instance.sigma2,
        rho: instance.rho,
        m: instance.m(),
        n: instance.n(),
    };
    write_json(&files.meta, &meta)
}

pub fn load_instance(dir: &Path) -> Result<(ProblemInstance, InstanceMeta)> {
    let files = InstanceFiles::in_dir(dir);
    let meta: InstanceMeta = read_json(&files.meta)?;
    meta.ensemble.validate()?;
    let a = read_matrix(&files.design)?;
    let y = read_vector(&files.response)?;
    let x0 = read_vector(&files.signal)?;
    let xi = read_vector(&files.noise)?;
    if a.shape() != (meta.m, meta.n) || y.len() != meta.m || x0.len() != meta.n || xi.len() != meta.m {
        return Err(Error::Shape(format!(
            "{}: stored arrays do not match the declared {}x{} instance",
            dir.display(),
            meta.m,
            meta.n
        )));
    }
    let instance = ProblemInstance {
        ensemble: meta.ensemble,
        a,
        y,
        x0,
        xi,
        sigma2: meta.sigma2,
        rho: meta.rho,
    };
    Ok((instance, meta))
}

pub const COORDINATE_HEADER: [&str; 9] = [
    "index",
    "x0",
    "x_lasso",
    "h",
    "x_debiased",
    "ci_lo",
    "ci_hi",
    "p_value",
    "reject",
];

/// Per-coordinate table of one inference run.
pub fn write_coordinates(
    path: &Path,
    x0: &DVector<f64>,
    fit: &LassoFit,
    inference: &InferenceResult,
    test: &TestOutcome,
) -> Result<()> {
    let rows = (0..fit.n()).map(|i| {
        [
            i.to_string(),
            fmt(x0[i]),
            fmt(fit.x_hat[i]),
            fmt(inference.h[i]),
            fmt(inference.x_debiased[i]),
            fmt(inference.ci_lo[i]),
            fmt(inference.ci_hi[i]),
            fmt(inference.p_values[i]),
            test.reject[i].to_string(),
        ]
    });
    write_table(path, &COORDINATE_HEADER, rows)
}

/// Scalar summary of one inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub ensemble: EnsembleSpec,
    pub lambda: f64,
    pub rho_active: f64,
    pub chi: f64,
    pub q_hat: f64,
    pub chi_hat: f64,
    pub rss: f64,
    /// Noise level used in χ̂; equals the estimate when σ² was estimated.
    pub sigma2_used: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_hat: Option<f64>,
    pub alpha_tilde: f64,
    #[serde(with = "float")]
    pub fpr: f64,
    #[serde(with = "float")]
    pub tpr: f64,
    pub kkt_residual: f64,
}

impl InferenceSummary {
    pub fn new(
        ensemble: EnsembleSpec,
        fit: &LassoFit,
        state: &SpectralState,
        sigma2_used: f64,
        sigma2_hat: Option<f64>,
        test: &TestOutcome,
    ) -> Self {
        Self {
            ensemble,
            lambda: fit.lambda,
            rho_active: fit.rho_active,
            chi: state.chi,
            q_hat: state.q_hat,
            chi_hat: state.chi_hat.unwrap_or(f64::NAN),
            rss: fit.rss,
            sigma2_used,
            sigma2_hat,
            alpha_tilde: test.alpha_tilde,
            fpr: test.fpr,
            tpr: test.tpr,
            kkt_residual: fit.kkt_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips() {
        let p = Path::new("x");
        for v in [
            0.0,
            -0.0,
            0.1,
            1.0 / 3.0,
            1e-300,
            -2.5e-7,
            6.02e23,
            123456.789,
            f64::MIN_POSITIVE,
            f64::MAX,
        ] {
            let back = parse(&fmt(v), p).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {}", fmt(v));
        }
        assert_eq!(parse(&fmt(f64::INFINITY), p).unwrap(), f64::INFINITY);
        assert!(parse(&fmt(f64::NAN), p).unwrap().is_nan());
        assert_eq!(fmt(0.25), "0.25");
        assert_eq!(fmt(1e-300), "1e-300");
    }

    #[test]
    fn matrix_and_vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) / (j as f64 + 7.0) - 0.3);
        write_matrix(&dir.path().join("a.csv"), &a).unwrap();
        assert_eq!(read_matrix(&dir.path().join("a.csv")).unwrap(), a);
        let v = DVector::from_fn(5, |i, _| (i as f64).sin());
        write_vector(&dir.path().join("v.csv"), "v", &v).unwrap();
        assert_eq!(read_vector(&dir.path().join("v.csv")).unwrap(), v);
        let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn instance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EnsembleSpec::row_orthogonal(0.5).unwrap();
        let inst = ProblemInstance::generate(&spec, 30, 0.2, 0.02, 4).unwrap();
        save_instance(dir.path(), &inst, 4).unwrap();
        let (back, meta) = load_instance(dir.path()).unwrap();
        assert_eq!(back.a, inst.a);
        assert_eq!(back.y, inst.y);
        assert_eq!(back.x0, inst.x0);
        assert_eq!(meta.seed, 4);
        assert_eq!((meta.m, meta.n), (15, 30));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_matrix(Path::new("/nonexistent/a.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.csv"), "{err}");
    }
}
