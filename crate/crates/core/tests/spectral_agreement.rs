use lasso_tap::ensemble::EnsembleSpec;
use lasso_tap::spectral::{spectral_state_closed_form, spectral_state_generic};

#[test]
fn closed_forms_match_generic_path() {
    let mut worst: f64 = 0.0;
    for gamma in [0.3, 0.5, 0.8] {
        for i in 0..10 {
            let rho = if i == 0 { 0.01 } else { 0.05 * i as f64 };
            if rho >= gamma {
                continue;
            }
            for spec in [
                EnsembleSpec::gaussian(gamma).unwrap(),
                EnsembleSpec::row_orthogonal(gamma).unwrap(),
            ] {
                let closed = spectral_state_closed_form(&spec, rho).unwrap().unwrap();
                let generic = spectral_state_generic(&spec.density(), rho).unwrap();
                for (name, a, b) in [
                    ("chi", closed.chi, generic.chi),
                    ("z", closed.z, generic.z),
                    ("q_hat", closed.q_hat, generic.q_hat),
                    ("g1", closed.g1, generic.g1),
                    ("g2", closed.g2, generic.g2),
                ] {
                    let err = (a - b).abs();
                    worst = worst.max(err);
                    assert!(
                        err < 1e-10,
                        "{:?} gamma={gamma} rho={rho} {name}: {a} vs {b}",
                        spec.kind
                    );
                }
            }
        }
    }
    println!("worst disagreement {worst:e}");
}
