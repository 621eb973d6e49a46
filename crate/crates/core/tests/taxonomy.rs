use imp_lasso::features::enumerate_modules;
use imp_lasso::rng::SeedStream;
use imp_lasso::scm::{perturb_environments, random_model};
use imp_lasso::taxonomy::{Label, Population, DEFAULT_TOL};

/// Modules meeting the sufficient condition for an invariant matching
/// property: target outside the perturbed parents, conditioning set
/// covering them, and coefficients that move across environments.
#[test]
fn sufficient_condition_modules_are_matched() {
    for seed in 0..40u64 {
        let s = SeedStream::new(seed);
        let d = 4 + (seed % 3) as usize;
        let model = random_model(&mut s.child(1).rng(), d).unwrap();
        let (model, envs) = perturb_environments(&model, &mut s.child(2).rng(), 5, 0, 2.0, 0.0).unwrap();
        assert!(!model.response_children().is_empty());
        let pop = Population::new(&model, &envs).unwrap();
        let pe = model.pe_set();
        for id in enumerate_modules(d, None) {
            let label = pop.classify(&id, DEFAULT_TOL).unwrap();
            let covers = pe.iter().all(|j| id.r().contains(j));
            if !pe.contains(&id.k()) && covers && label.variation > DEFAULT_TOL {
                assert_eq!(label.label, Label::Matched, "seed {seed} module {id}: {label:?}");
                assert!(label.residual <= 1e-6);
            }
            if label.variation <= DEFAULT_TOL {
                assert_ne!(label.label, Label::AntiMatching);
            }
            if label.label == Label::Matched {
                // the certificate reproduces every response regression
                let cert = pop.certify(&id).unwrap();
                let w = pop.module_coefficients(&id).unwrap();
                for (c, w) in pop.response_coefficients().iter().zip(&w) {
                    for i in 0..d {
                        let rebuilt = cert.lambda_imp * w[i] + cert.eta[i];
                        assert!((rebuilt - c[i]).abs() <= DEFAULT_TOL);
                    }
                    assert!((cert.lambda_imp * w[d] + cert.eta_intercept - c[d]).abs() <= DEFAULT_TOL);
                }
            }
        }
    }
}
