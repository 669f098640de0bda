mod common;

use std::collections::BTreeMap;

use fetwfe::design::DesignLayout;
use fetwfe::effects::{
    aggregate_weighted, att_from_beta, cohort_att, cohort_weights, default_shares,
};
use fetwfe::fusion::build_fusion;
use fetwfe::inference::{
    cohort_average_psi, cohort_share_fn, jacobian_at, psi_vector_fixed, selected_cov,
    sigma_m_hat, var_conservative, var_fixed, var_weighted, SelectedCovariance,
};
use fetwfe::panel::CohortCounts;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn counts_strategy() -> impl Strategy<Value = CohortCounts> {
    (1usize..50, prop::collection::vec(1usize..50, 1..6)).prop_map(|(n0, per)| {
        let per = per.into_iter().enumerate().map(|(k, c)| (k + 2, c)).collect();
        CohortCounts::new(n0, per)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sigma_m_rows_sum_to_zero(counts in counts_strategy()) {
        let s = sigma_m_hat(&counts);
        for i in 0..s.nrows() {
            prop_assert!(s.row(i).sum().abs() <= 1e-12);
        }
        prop_assert!((&s - s.transpose()).amax() == 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences(raw in prop::collection::vec(0.05f64..1.0, 2..7)) {
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let jac = jacobian_at(&pi).unwrap();
        let h = 1e-6;
        for w in 0..pi.len() {
            let mut up = pi.clone();
            let mut dn = pi.clone();
            up[w] += h;
            dn[w] -= h;
            let fu = cohort_share_fn(&up).unwrap();
            let fd = cohort_share_fn(&dn).unwrap();
            for r in 0..fu.len() {
                let fd_est = (fu[r] - fd[r]) / (2.0 * h);
                prop_assert!((fd_est - jac[(w, r)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn conservative_dominates_split(a in 0.0f64..1e3, b in 0.0f64..1e3) {
        let v = var_conservative(a, b);
        prop_assert!(v.value >= a + b);
        prop_assert!(v.value >= 0.0);
    }

    #[test]
    fn overall_telescoping(seed in 0u64..100_000, counts in counts_strategy()) {
        let cohorts: Vec<usize> = counts.per_cohort.iter().map(|&(r, _)| r).collect();
        let t = *cohorts.last().unwrap() + 1;
        let layout = DesignLayout::new(t, &cohorts, 1).unwrap();
        let mut rng = common::rng(seed);
        let beta = common::normal_vec(&mut rng, layout.p());
        let att = att_from_beta(&beta, &layout).unwrap();
        let ca = cohort_att(&att, &layout);
        let got = aggregate_weighted(&att, &counts, &layout).unwrap();
        let want: f64 = counts
            .per_cohort
            .iter()
            .map(|&(r, n)| n as f64 / counts.treated as f64 * ca[&r])
            .sum();
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        let shares = default_shares(&counts).unwrap();
        prop_assert!((shares.values().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn psi_pairs_with_theta_as_aggregate(seed in 0u64..100_000) {
        let layout = DesignLayout::new(6, &[2, 4, 5], 2).unwrap();
        let fusion = build_fusion(&layout);
        let mut rng = common::rng(seed);
        let theta = common::normal_vec(&mut rng, layout.p());
        let att = att_from_beta(&fusion.invert(&theta), &layout).unwrap();
        let weights: BTreeMap<(usize, usize), f64> = layout
            .tau_cells()
            .into_iter()
            .zip(common::normal_vec(&mut rng, layout.w_count()))
            .collect();
        let psi = psi_vector_fixed(&weights, &fusion, &layout).unwrap();
        let lhs: f64 = psi.iter().zip(&theta).map(|(a, b)| a * b).sum();
        let rhs: f64 = weights.iter().map(|(k, w)| w * att[k]).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }
}

#[test]
fn psi_is_weighted_row_sum_of_inverse() {
    let layout = DesignLayout::new(5, &[2, 3, 4], 1).unwrap();
    let fusion = build_fusion(&layout);
    let dinv = fusion.d_inv().to_dense();
    let weights = cohort_weights(&layout, 3);
    let psi = psi_vector_fixed(&weights, &fusion, &layout).unwrap();
    let mut want = DVector::zeros(layout.p());
    for (&(r, t), w) in &weights {
        want += dinv.row(layout.tau_index(r, t).unwrap()).transpose() * *w;
    }
    for j in 0..layout.p() {
        assert!((psi[j] - want[j]).abs() <= 1e-14);
    }
}

#[test]
fn selected_cov_matches_dense_oracle() {
    let layout = DesignLayout::new(5, &[2, 3, 4], 1).unwrap();
    let fusion = build_fusion(&layout);
    let mut rng = common::rng(9);
    let n = 200;
    let z = common::normal_matrix(&mut rng, n, layout.p());
    let sel = vec![0, 4, 9, 15, layout.p() - 1];
    let cov = selected_cov(&z, &fusion, &sel).unwrap();
    let a = (&z * fusion.d_inv().to_dense()).select_columns(&sel);
    let mean = a.row_mean();
    let ac = DMatrix::from_fn(n, sel.len(), |i, j| a[(i, j)] - mean[j]);
    let want = ac.tr_mul(&ac) / n as f64;
    assert!((&cov.matrix - &want).amax() <= 1e-10);
    let eye = DMatrix::<f64>::identity(sel.len(), sel.len());
    assert!((&cov.inverse * &cov.matrix - eye).amax() <= 1e-8);
}

#[test]
fn var_weighted_replays_formula() {
    let layout = DesignLayout::new(6, &[2, 3, 5], 1).unwrap();
    let fusion = build_fusion(&layout);
    let mut rng = common::rng(31);
    let n = 300;
    let x = common::normal_matrix(&mut rng, n, layout.p());
    let o = layout.offsets();
    let sel: Vec<usize> = (o.treatment..o.treatment + layout.w_count()).step_by(2).collect();
    let cov = SelectedCovariance::from_columns(x.select_columns(&sel), sel.clone()).unwrap();
    let mut theta = vec![0.0; layout.p()];
    for &j in &sel {
        theta[j] = common::normal_vec(&mut rng, 1)[0];
    }
    let counts = CohortCounts::new(40, vec![(2, 25), (3, 15), (5, 20)]);
    let psi = cohort_average_psi(&layout);
    let sigma_sq = 1.7;
    let wv = var_weighted(&theta, &layout, &fusion, &cov, &counts, &psi, sigma_sq).unwrap();

    // replay with dense matrices
    let dinv = fusion.d_inv().to_dense();
    let k = sel.len();
    let cohorts = layout.cohorts();
    let mut m = DMatrix::zeros(cohorts.len(), k);
    for (ri, &r) in cohorts.iter().enumerate() {
        for t in r..=layout.n_times() {
            let row = dinv.row(layout.tau_index(r, t).unwrap());
            for (c, &j) in sel.iter().enumerate() {
                m[(ri, c)] += psi[&(r, t)] * row[j];
            }
        }
    }
    let nt = counts.treated as f64;
    let f = DVector::from_iterator(cohorts.len(), counts.per_cohort.iter().map(|&(_, c)| c as f64 / nt));
    let psi_s = m.transpose() * &f;
    let first = sigma_sq * (psi_s.transpose() * &cov.inverse * &psi_s)[0];

    let pi: Vec<f64> = counts.proportions();
    let sm = DMatrix::from_fn(pi.len(), pi.len(), |i, j| {
        if i == j { pi[i] * (1.0 - pi[i]) } else { -pi[i] * pi[j] }
    });
    // ∂f_r/∂π_w by hand
    let s: f64 = pi[1..].iter().sum();
    let jac = DMatrix::from_fn(pi.len(), cohorts.len(), |w, r| {
        if w == 0 { 0.0 } else if w == r + 1 { (s - pi[w]) / (s * s) } else { -pi[r + 1] / (s * s) }
    });
    let v = (&jac * &m).transpose() * &sm * (&jac * &m) * layout.n_times() as f64;
    let th = DVector::from_iterator(k, sel.iter().map(|&j| theta[j]));
    let second = (th.transpose() * v * &th)[0];

    assert!((wv.first - first).abs() <= 1e-10 * first.max(1.0));
    assert!((wv.second - second).abs() <= 1e-10 * second.max(1.0));
    assert!(wv.conservative().value >= wv.split().value);
}

#[test]
fn var_fixed_ignores_orthogonal_zero_weight_column() {
    let layout = DesignLayout::new(4, &[2, 3], 0).unwrap();
    let mut rng = common::rng(4);
    let n = 64;
    // orthonormal columns that stay orthogonal after centering
    let mut a = common::normal_matrix(&mut rng, n, 5);
    a.column_mut(0).fill(1.0);
    let q = a.qr().q().columns(1, 4).into_owned() * (n as f64).sqrt();
    let mut psi = vec![0.0; layout.p()];
    psi[0] = 0.3;
    psi[1] = -1.2;
    let small = SelectedCovariance::from_columns(q.columns(0, 2).into_owned(), vec![0, 1]).unwrap();
    let big = SelectedCovariance::from_columns(q.columns(0, 3).into_owned(), vec![0, 1, 2]).unwrap();
    let a = var_fixed(&psi, &small, 2.0).unwrap().value;
    let b = var_fixed(&psi, &big, 2.0).unwrap().value;
    assert!((a - b).abs() <= 1e-8);
}
