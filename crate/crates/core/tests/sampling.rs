use imp_lasso::rng::SeedStream;
use imp_lasso::scm::{
    perturb_environments, population_moments, random_model, sample_environment, MeasurementErrorSpec,
    NonlinearitySpec,
};

/// Largest deviation of sample moments from population moments, in
/// standard errors (Gaussian formulas).
fn max_z_score(seed: u64, d: usize, n: usize, me: f64) -> f64 {
    let s = SeedStream::new(seed);
    let model = random_model(&mut s.child(1).rng(), d).unwrap();
    let (model, envs) = perturb_environments(&model, &mut s.child(2).rng(), 1, 1, 2.0, 5.0).unwrap();
    let env = &envs[1];
    let nl = NonlinearitySpec::default();
    let spec = MeasurementErrorSpec {
        variance: me,
        exclude_test_response: false,
    };
    let (x, y) = sample_environment(&model, env, n, &mut s.child(3).rng(), &nl, &spec, true).unwrap();
    let pop = population_moments(&model, env, &nl).unwrap().with_measurement_error(me, true);
    let mut data = x.insert_column(d, 0.0);
    data.set_column(d, &y);
    let mean = data.row_mean();
    let mut worst = 0.0_f64;
    for a in 0..=d {
        let se = (pop.cov[(a, a)] / n as f64).sqrt();
        worst = worst.max((mean[a] - pop.mean[a]).abs() / se);
        for b in a..=d {
            let c = data
                .column(a)
                .iter()
                .zip(data.column(b).iter())
                .map(|(u, v)| (u - mean[a]) * (v - mean[b]))
                .sum::<f64>()
                / (n - 1) as f64;
            let se = ((pop.cov[(a, a)] * pop.cov[(b, b)] + pop.cov[(a, b)].powi(2)) / n as f64).sqrt();
            worst = worst.max((c - pop.cov[(a, b)]).abs() / se);
        }
    }
    worst
}

#[test]
fn sample_moments_agree_with_population() {
    for seed in 0..4 {
        let z = max_z_score(seed, 4 + seed as usize, 40_000, 0.0);
        assert!(z < 5.0, "seed {seed}: {z}");
    }
}

#[test]
fn measurement_error_inflates_variances_only() {
    let z = max_z_score(9, 5, 40_000, 2.5);
    assert!(z < 5.0, "{z}");
}
