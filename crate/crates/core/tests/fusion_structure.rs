mod common;

use fetwfe::design::{count_params, DesignLayout};
use fetwfe::fusion::{build_fusion, dense_product_residual, penalty_value, FusionMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn configs() -> Vec<(usize, Vec<usize>, usize)> {
    vec![
        (2, vec![2], 1),
        (5, vec![2, 3, 4], 2),
        (5, vec![3, 5], 0),
        (6, vec![2, 4, 6], 3),
        (10, (2..=6).collect(), 6),
        (30, (2..=6).collect(), 12),
        (33, vec![6, 7, 8, 9, 10, 11, 12, 13, 14, 17, 21, 22], 2),
    ]
}

#[test]
fn paper_parameter_counts() {
    assert_eq!(count_params(30, &(2..=6).collect::<Vec<_>>(), 12).unwrap().0, 2209);
    assert_eq!(count_params(5, &[2, 3, 4], 2).unwrap().0, 50);
    let divorce = count_params(33, &[6, 7, 8, 9, 10, 11, 12, 13, 14, 17, 21, 22], 2).unwrap();
    assert_eq!(divorce.0, 908);
}

#[test]
fn d_times_inverse_is_identity() {
    for (t, cohorts, d) in configs() {
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let f = build_fusion(&layout);
        assert!(dense_product_residual(&f) <= 1e-12, "T={t}");
    }
}

#[test]
fn d_inverse_columns_solve_unit_systems() {
    for (t, cohorts, d) in configs().into_iter().filter(|c| c.0 <= 10) {
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let f = build_fusion(&layout);
        let lu = f.d().to_dense().lu();
        for j in 0..f.p() {
            let mut e = DVector::zeros(f.p());
            e[j] = 1.0;
            let solved = lu.solve(&e).unwrap();
            let col = f.invert(e.as_slice());
            for i in 0..f.p() {
                assert!((solved[i] - col[i]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn singular_value_bounds() {
    for (t, cohorts, d) in configs().into_iter().filter(|c| c.0 <= 30) {
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let sv = build_fusion(&layout).d().to_dense().singular_values();
        let max = sv.max();
        let min = sv.min();
        let tf = t as f64;
        assert!(max <= 3.0, "T={t}: {max}");
        assert!(min >= 1.0 / (tf * (2.0 * tf).sqrt()), "T={t}: {min}");
    }
}

#[test]
fn sparsity_of_rows() {
    for (t, cohorts, d) in configs() {
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let f = build_fusion(&layout);
        for i in 0..f.p() {
            assert!(f.d().row(i).count() <= 2);
            assert!(f.d_inv().row(i).count() <= (t - 1) * (t - 1));
            assert!(f.d_inv().row(i).all(|(_, v)| v == 0.0 || v == 1.0));
        }
    }
}

/// `Σ|(Dβ)_i|^q` spelled out term by term from the layout.
fn penalty_oracle(beta: &[f64], q: f64, layout: &DesignLayout) -> f64 {
    let pw = |v: f64| v.abs().powf(q);
    let chain = |start: usize, len: usize| -> f64 {
        (0..len)
            .map(|k| {
                if k + 1 < len {
                    pw(beta[start + k] - beta[start + k + 1])
                } else {
                    pw(beta[start + k])
                }
            })
            .sum()
    };
    let r = layout.n_cohorts();
    let tm1 = layout.n_times() - 1;
    let d = layout.n_covariates();
    let o = layout.offsets();
    let mut s = chain(o.cohort_fe, r) + chain(o.time_fe, tm1);
    for j in 0..d {
        s += pw(beta[o.covariates + j]);
        s += chain(o.cohort_cov + j * r, r);
        s += chain(o.time_cov + j * tm1, tm1);
    }
    let tau_terms = |idx: &dyn Fn(usize, usize) -> usize| -> f64 {
        let cohorts = layout.cohorts();
        let mut s = 0.0;
        for (k, &rk) in cohorts.iter().enumerate() {
            s += if k == 0 {
                pw(beta[idx(rk, rk)])
            } else {
                let prev = cohorts[k - 1];
                pw(beta[idx(rk, rk)] - beta[idx(prev, prev)])
            };
            for t in rk + 1..=layout.n_times() {
                s += pw(beta[idx(rk, t)] - beta[idx(rk, t - 1)]);
            }
        }
        s
    };
    s += tau_terms(&|r, t| layout.tau_index(r, t).unwrap());
    for j in 0..d {
        s += tau_terms(&|r, t| layout.rho_index(r, t, j).unwrap());
    }
    s
}

proptest! {
    #[test]
    fn penalty_matches_term_enumeration(
        seed in 0u64..1000,
        cfg in 0usize..6,
        q in prop::sample::select(vec![0.25, 0.5, 1.0, 1.5, 2.0]),
    ) {
        let (t, cohorts, d) = configs()[cfg].clone();
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let f = build_fusion(&layout);
        let mut rng = common::rng(seed);
        let beta = common::normal_vec(&mut rng, layout.p());
        let got = penalty_value(&beta, q, &f).unwrap();
        let want = penalty_oracle(&beta, q, &layout);
        prop_assert!((got - want).abs() <= 1e-10 * want.max(1.0));
    }

    #[test]
    fn apply_and_invert_roundtrip(seed in 0u64..1000, cfg in 0usize..6) {
        let (t, cohorts, d) = configs()[cfg].clone();
        let layout = DesignLayout::new(t, &cohorts, d).unwrap();
        let f = build_fusion(&layout);
        let mut rng = common::rng(seed);
        let theta = common::normal_vec(&mut rng, layout.p());
        let back = f.apply(&f.invert(&theta));
        for (a, b) in back.iter().zip(&theta) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn identity_structure_penalizes_coefficients() {
    let layout = DesignLayout::new(5, &[2, 3, 4], 2).unwrap();
    let f = FusionMatrix::identity(&layout);
    let beta: Vec<f64> = (0..layout.p()).map(|j| j as f64 - 20.0).collect();
    let want: f64 = beta.iter().map(|b: &f64| b.abs()).sum();
    assert_eq!(penalty_value(&beta, 1.0, &f).unwrap(), want);
    assert_eq!(f.d().to_dense(), DMatrix::identity(layout.p(), layout.p()));
}
