use fetwfe::design::{build_design, center_response_and_columns};
use fetwfe::simulate::{gen_coefficients, gen_panel, replicate_rng, run_replicate, run_study, SimConfig};
use fetwfe::solver::{BridgeProblem, SolverConfig};
use nalgebra::DVector;

#[test]
fn identical_configs_give_identical_metrics() {
    let cfg = SimConfig {
        n_units: 90,
        replications: 4,
        seed: 17,
        ..SimConfig::study2_desk()
    };
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(a, b);
    let m = &a.0;
    for r in m.cohort_coverage.iter().chain([&m.overall_conservative_coverage, &m.overall_split_coverage]) {
        assert!((0.0..=1.0).contains(&r.rate));
    }
    assert!(m.methods.iter().all(|x| x.att_sq_error.is_none_or(|s| s.se >= 0.0)));
}

#[test]
fn noiseless_least_squares_recovers_beta() {
    let cfg = SimConfig {
        n_units: 60,
        sigma_sq: 0.0,
        sigma_c_sq: 0.0,
        ..SimConfig::study2_desk()
    };
    let layout = cfg.layout().unwrap();
    let (theta, beta) = gen_coefficients(&layout, &cfg, 3);
    let (data, _) = gen_panel(&cfg, &theta, &beta, &mut replicate_rng(3, 0)).unwrap();
    let dm = build_design(&data).unwrap();
    let y = DVector::from_vec(data.stacked_response());
    let c = center_response_and_columns(&dm.values, &y);
    let solver = SolverConfig::default();
    let fit = BridgeProblem::new(&c.design, &c.response, &solver).unwrap().fit(0.0, &solver, None).unwrap();
    for (a, b) in fit.beta_hat.iter().zip(&beta) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn null_effects_are_estimated_as_exact_zero() {
    let cfg = SimConfig {
        replications: 20,
        ..SimConfig::study2()
    };
    let p = cfg.layout().unwrap().p();
    let zeros = vec![0.0; p];
    let hits = (0..cfg.replications)
        .filter(|&i| run_replicate(&cfg, &zeros, &zeros, i).unwrap().fetwfe_overall == 0.0)
        .count();
    assert!(hits as f64 >= 0.9 * cfg.replications as f64, "{hits} of {}", cfg.replications);
}
