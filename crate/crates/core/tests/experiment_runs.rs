use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lasso_tap::ensemble::EnsembleSpec;
use lasso_tap::experiment::{files, read_records, regenerate_figures, run_experiment, ExperimentConfig};
use lasso_tap::io::{read_table, read_vector};
use lasso_tap::selection::NoiseSource;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn assert_same(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in a {
        assert!(bytes == &b[name], "{name} differs");
    }
}

fn config(dir: &Path, ensemble: EnsembleSpec) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ensemble, 50, 0.2, 0.02, dir.to_path_buf());
    c.seed = 8;
    c.grid_points = 6;
    c.grid_depth = 30.0;
    c
}

#[test]
fn smoke_run_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), EnsembleSpec::gaussian(0.5).unwrap());
    let summary = run_experiment(&c).unwrap();
    assert_eq!(summary.points.len(), 6);
    let rows = |name: &str| read_table(&dir.path().join(name)).unwrap().1.len();
    assert_eq!(rows(files::COORDINATES), 50);
    assert_eq!(rows(files::QQ), 50);
    assert_eq!(rows(files::BIAS_VARIANCE), 6);
    assert_eq!(rows(files::CI_WIDTH), 6);
    assert_eq!(rows(files::LASSO_ROC), 6);
    assert_eq!(rows(files::FPR_ALPHA), 6 * c.alphas.len());
    assert_eq!(rows(files::ROC), 6 * c.alphas.len());
    assert_eq!(rows(&format!("{}/rep_00000.csv", files::REPLICATIONS)), 6);
    assert_eq!(read_records(&dir.path().join(files::RECORDS)).unwrap().len(), 1);
    assert!(dir.path().join(files::SUMMARY).exists());
    assert!(dir.path().join(files::COORDINATES_SUMMARY).exists());
}

#[test]
fn coordinates_round_trip_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), EnsembleSpec::row_orthogonal(0.5).unwrap());
    run_experiment(&c).unwrap();
    let x0 = c.signal().unwrap();
    let (header, rows) = read_table(&dir.path().join(files::COORDINATES)).unwrap();
    assert_eq!(header[1], "x0");
    for (i, row) in rows.iter().enumerate() {
        let v: f64 = row[1].parse().unwrap();
        assert_eq!(v.to_bits(), x0[i].to_bits());
    }
    fs::write(dir.path().join("x0.csv"), {
        let mut s = String::from("x0\n");
        rows.iter().for_each(|r| s.push_str(&format!("{}\n", r[1])));
        s
    })
    .unwrap();
    assert_eq!(read_vector(&dir.path().join("x0.csv")).unwrap(), x0);
}

#[test]
fn identical_config_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), EnsembleSpec::random_dct(0.5).unwrap());
    c.n_replications = 3;
    c.sigma2_mode = NoiseSource::Estimated;
    c.cv_folds = 5;
    run_experiment(&c).unwrap();
    let first = snapshot(dir.path());
    run_experiment(&c).unwrap();
    assert_same(&first, &snapshot(dir.path()));
}

#[test]
fn aggregates_do_not_depend_on_workers() {
    let one = tempfile::tempdir().unwrap();
    let three = tempfile::tempdir().unwrap();
    let mut c = config(one.path(), EnsembleSpec::gaussian(0.5).unwrap());
    c.n_replications = 5;
    let s1 = run_experiment(&c).unwrap();
    c.workers = 3;
    c.output_dir = three.path().to_path_buf();
    let s3 = run_experiment(&c).unwrap();
    assert_eq!(s1.points, s3.points);
    let (a, b) = (snapshot(one.path()), snapshot(three.path()));
    for (name, bytes) in &a {
        if name != files::SUMMARY {
            assert!(Some(bytes) == b.get(name), "{name} differs");
        }
    }
}

#[test]
fn figures_regenerate_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), EnsembleSpec::gaussian(0.5).unwrap());
    c.n_replications = 2;
    run_experiment(&c).unwrap();
    let before = snapshot(dir.path());
    for name in [files::SUMMARY, files::BIAS_VARIANCE, files::QQ, files::COORDINATES] {
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    regenerate_figures(&c).unwrap();
    assert_same(&before, &snapshot(dir.path()));
}

#[test]
fn unwritable_output_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let c = config(&blocker.join("out"), EnsembleSpec::gaussian(0.5).unwrap());
    let err = run_experiment(&c).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}
