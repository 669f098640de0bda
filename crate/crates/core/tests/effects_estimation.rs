mod common;

use fetwfe::design::{build_design, DesignLayout};
use fetwfe::effects::{att_from_beta, catt_point};
use fetwfe::estimator::{estimate, fit, EstimatorConfig};
use fetwfe::fusion::build_fusion;
use fetwfe::simulate::{gen_coefficients, gen_panel, replicate_rng, SimConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn att_is_linear_in_theta(seed in 0u64..100_000) {
        let layout = DesignLayout::new(6, &[2, 3, 5], 2).unwrap();
        let f = build_fusion(&layout);
        let mut rng = common::rng(seed);
        let a = common::normal_vec(&mut rng, layout.p());
        let b = common::normal_vec(&mut rng, layout.p());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ta = att_from_beta(&f.invert(&a), &layout).unwrap();
        let tb = att_from_beta(&f.invert(&b), &layout).unwrap();
        let ts = att_from_beta(&f.invert(&sum), &layout).unwrap();
        for (k, v) in &ts {
            prop_assert!((v - ta[k] - tb[k]).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}

fn small_config() -> SimConfig {
    SimConfig {
        n_units: 120,
        replications: 1,
        ..SimConfig::study2_desk()
    }
}

#[test]
fn catt_at_cohort_mean_equals_att() {
    let cfg = small_config();
    let layout = cfg.layout().unwrap();
    let (theta, beta) = gen_coefficients(&layout, &cfg, 5);
    let (data, _) = gen_panel(&cfg, &theta, &beta, &mut replicate_rng(5, 0)).unwrap();
    let config = EstimatorConfig {
        sigma_sq: Some(cfg.sigma_sq),
        sigma_c_sq: Some(cfg.sigma_c_sq),
        ..Default::default()
    };
    let model = fit(&data, &config).unwrap();
    let layout = &model.prepared.layout;
    let att = model.att();
    let means = build_design(&data).unwrap().layout.cohort_means().clone();
    for (r, t) in layout.tau_cells() {
        let k = layout.cohort_position(r).unwrap();
        let x: Vec<f64> = means.row(k).iter().copied().collect();
        assert_eq!(catt_point(&model.fit, layout, r, t, &x).unwrap(), att[&(r, t)]);
    }
}

#[test]
fn pipeline_report_is_coherent() {
    let cfg = small_config();
    let layout = cfg.layout().unwrap();
    let (theta, beta) = gen_coefficients(&layout, &cfg, 9);
    let (data, _) = gen_panel(&cfg, &theta, &beta, &mut replicate_rng(9, 0)).unwrap();
    let out = estimate(&data, &EstimatorConfig::default(), None, None).unwrap();
    let rep = &out.report;
    assert_eq!(rep.cohort_att.len(), 3);
    assert_eq!(rep.att.len(), layout.w_count());
    let o = &rep.overall.value;
    assert!(o.estimate.is_finite());
    if !o.degenerate {
        assert!(o.ci_low.unwrap() <= o.estimate && o.estimate <= o.ci_high.unwrap());
    }
    let zero_note = rep.notes.iter().any(|n| n.contains("no restriction zeroed"));
    assert!(zero_note || !rep.zeroed_cohorts.is_empty());
    // beta is D⁻¹θ exactly
    let back = out.model.prepared.fusion.invert(&out.model.fit.theta_hat);
    for (a, b) in back.iter().zip(&out.model.fit.beta_hat) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}
