//! Variance estimators and normal-theory intervals for aggregated effects.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use thiserror::Error;

use crate::design::DesignLayout;
use crate::effects::AttTable;
use crate::fusion::FusionMatrix;
use crate::panel::CohortCounts;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("selected set is empty")]
    EmptySelection,
    #[error("covariance of the selected columns is singular")]
    SingularCovariance,
    #[error("weight key (r={r}, t={t}) is not a treated cohort-time cell")]
    UnknownKey { r: usize, t: usize },
    #[error("no treated units; cohort shares are undefined")]
    NoTreatedUnits,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("selected index {0} is out of range")]
    IndexOutOfRange(usize),
}

/// Sample covariance `(1/n) AᵀA` of the centered selected columns of
/// `Z D⁻¹`, with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedCovariance {
    pub indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

impl SelectedCovariance {
    /// From already-formed columns `A` (one per selected index).
    pub fn from_columns(mut a: DMatrix<f64>, indices: Vec<usize>) -> Result<Self, InferenceError> {
        if indices.is_empty() {
            return Err(InferenceError::EmptySelection);
        }
        if a.ncols() != indices.len() {
            return Err(InferenceError::DimensionMismatch(format!(
                "{} columns for {} indices",
                a.ncols(),
                indices.len()
            )));
        }
        let n = a.nrows() as f64;
        for mut col in a.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let mut matrix = a.tr_mul(&a) / n;
        matrix = (&matrix + matrix.transpose()) * 0.5;
        let k = matrix.nrows();
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or(InferenceError::SingularCovariance)?;
        let inverse = chol.inverse();
        let residual = (&inverse * &matrix - DMatrix::<f64>::identity(k, k)).amax();
        if !(residual <= 1e-8) {
            return Err(InferenceError::SingularCovariance);
        }
        Ok(Self {
            indices,
            matrix,
            inverse,
        })
    }
}

/// Covariance of the selected columns of `Z D⁻¹` given the (transformed)
/// design `Z`.
pub fn selected_cov(
    design: &DMatrix<f64>,
    fusion: &FusionMatrix,
    selected: &[usize],
) -> Result<SelectedCovariance, InferenceError> {
    if selected.is_empty() {
        return Err(InferenceError::EmptySelection);
    }
    if design.ncols() != fusion.p() {
        return Err(InferenceError::DimensionMismatch(format!(
            "design has {} columns, fusion has {}",
            design.ncols(),
            fusion.p()
        )));
    }
    if let Some(&j) = selected.iter().find(|&&j| j >= fusion.p()) {
        return Err(InferenceError::IndexOutOfRange(j));
    }
    let a = fusion.d_inv().left_mul_dense_columns(design, selected);
    SelectedCovariance::from_columns(a, selected.to_vec())
}

/// Same as [`selected_cov`] when `X = Z D⁻¹` is already formed.
pub fn selected_cov_reparam(
    x: &DMatrix<f64>,
    selected: &[usize],
) -> Result<SelectedCovariance, InferenceError> {
    if selected.is_empty() {
        return Err(InferenceError::EmptySelection);
    }
    if let Some(&j) = selected.iter().find(|&&j| j >= x.ncols()) {
        return Err(InferenceError::IndexOutOfRange(j));
    }
    SelectedCovariance::from_columns(x.select_columns(selected), selected.to_vec())
}

/// `Σ ψ_rt · (row i(r,t) of D⁻¹)`.
pub fn psi_vector_fixed(
    weights: &AttTable,
    fusion: &FusionMatrix,
    layout: &DesignLayout,
) -> Result<Vec<f64>, InferenceError> {
    let mut psi = vec![0.0; fusion.p()];
    for (&(r, t), &w) in weights {
        let i = layout
            .tau_index(r, t)
            .ok_or(InferenceError::UnknownKey { r, t })?;
        if w != 0.0 {
            for (j, v) in fusion.d_inv().row(i) {
                psi[j] += w * v;
            }
        }
    }
    Ok(psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Fixed,
    WeightedSplit,
    WeightedConservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub kind: VarianceKind,
    pub degenerate: bool,
}

fn restrict(v: &[f64], idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&j| v[j]))
}

fn quad(inv: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(inv * v)).max(0.0)
}

/// `σ² ψ_Ŝᵀ Ĉov⁻¹ ψ_Ŝ`.
pub fn var_fixed(
    psi: &[f64],
    cov: &SelectedCovariance,
    sigma_sq: f64,
) -> Result<VarianceEstimate, InferenceError> {
    if let Some(&j) = cov.indices.iter().find(|&&j| j >= psi.len()) {
        return Err(InferenceError::IndexOutOfRange(j));
    }
    let ps = restrict(psi, &cov.indices);
    Ok(VarianceEstimate {
        value: sigma_sq * quad(&cov.inverse, &ps),
        kind: VarianceKind::Fixed,
        degenerate: ps.iter().all(|&v| v == 0.0),
    })
}

/// Multinomial covariance `Σ̂_M` over `{0} ∪ cohorts`.
pub fn sigma_m_hat(counts: &CohortCounts) -> DMatrix<f64> {
    let n = counts.total() as f64;
    let c: Vec<f64> = std::iter::once(counts.never_treated)
        .chain(counts.per_cohort.iter().map(|&(_, k)| k))
        .map(|k| k as f64)
        .collect();
    let k = c.len();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            c[i] * (n - c[i]) / (n * n)
        } else {
            -c[i] * c[j] / (n * n)
        }
    })
}

/// `f_r(π) = π_r / Σ_{r'≥1} π_r'` for `π` over `{0} ∪ cohorts`.
pub fn cohort_share_fn(pi: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = pi[1..].iter().sum();
    (s > 0.0).then(|| pi[1..].iter().map(|p| p / s).collect())
}

/// `(R+1) x R` Jacobian of [`cohort_share_fn`] at `pi`, entry `[w, r]` being
/// `∂f_r/∂π_w`.
pub fn jacobian_at(pi: &[f64]) -> Result<DMatrix<f64>, InferenceError> {
    let r = pi.len().saturating_sub(1);
    let s: f64 = pi[1..].iter().sum();
    if !(s > 0.0) {
        return Err(InferenceError::NoTreatedUnits);
    }
    let s2 = s * s;
    Ok(DMatrix::from_fn(r + 1, r, |w, k| {
        if w == 0 {
            0.0
        } else if w == k + 1 {
            (s - pi[k + 1]) / s2
        } else {
            -pi[k + 1] / s2
        }
    }))
}

pub fn jacobian_cohort_share(counts: &CohortCounts) -> Result<DMatrix<f64>, InferenceError> {
    if counts.treated == 0 {
        return Err(InferenceError::NoTreatedUnits);
    }
    jacobian_at(&counts.proportions())
}

/// The two terms of the weighted-overall variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedVariance {
    /// `σ² ψ̂_Ŝᵀ Ĉov⁻¹ ψ̂_Ŝ`.
    pub first: f64,
    /// `θ̂_Ŝᵀ V̂ θ̂_Ŝ`.
    pub second: f64,
    pub degenerate: bool,
}

impl WeightedVariance {
    pub fn split(&self) -> VarianceEstimate {
        VarianceEstimate {
            value: self.first + self.second,
            kind: VarianceKind::WeightedSplit,
            degenerate: self.degenerate,
        }
    }

    pub fn conservative(&self) -> VarianceEstimate {
        VarianceEstimate {
            degenerate: self.degenerate,
            ..var_conservative(self.first, self.second)
        }
    }
}

/// Cohort-share weighted variance. `psi` gives per-cell weights before
/// shares (cohort averages by default); `counts` supply both the shares and
/// `Σ̂_M`.
#[allow(clippy::too_many_arguments)]
pub fn var_weighted(
    theta_hat: &[f64],
    layout: &DesignLayout,
    fusion: &FusionMatrix,
    cov: &SelectedCovariance,
    counts: &CohortCounts,
    psi: &AttTable,
    sigma_sq: f64,
) -> Result<WeightedVariance, InferenceError> {
    let shares = counts.treated_shares().ok_or(InferenceError::NoTreatedUnits)?;
    let cohorts = layout.cohorts();
    if counts.per_cohort.len() != cohorts.len()
        || counts.per_cohort.iter().zip(cohorts).any(|(&(r, _), &c)| r != c)
    {
        return Err(InferenceError::DimensionMismatch(
            "cohort counts do not match the layout".into(),
        ));
    }
    if theta_hat.len() != fusion.p() {
        return Err(InferenceError::DimensionMismatch(format!(
            "theta has length {}, expected {}",
            theta_hat.len(),
            fusion.p()
        )));
    }
    let sel = &cov.indices;
    // per-cohort rows of M̂ restricted to Ŝ
    let mut m = DMatrix::zeros(cohorts.len(), sel.len());
    for (k, &r) in cohorts.iter().enumerate() {
        let cell: AttTable = psi
            .iter()
            .filter(|(&(rr, _), _)| rr == r)
            .map(|(&key, &v)| (key, v))
            .collect();
        let row = psi_vector_fixed(&cell, fusion, layout)?;
        for (c, &j) in sel.iter().enumerate() {
            m[(k, c)] = row[j];
        }
    }
    for &(r, t) in psi.keys() {
        if !cohorts.contains(&r) {
            return Err(InferenceError::UnknownKey { r, t });
        }
    }
    let f = DVector::from_vec(shares);
    let psi_hat_s = m.tr_mul(&f);
    let first = sigma_sq * quad(&cov.inverse, &psi_hat_s);

    let jac = jacobian_cohort_share(counts)?;
    let sm = sigma_m_hat(counts);
    let th = restrict(theta_hat, sel);
    // θᵀ V θ = T ‖ Σ_M^{1/2} ∇f M θ ‖², computed as a quadratic form
    let g = &jac * (&m * &th);
    let second = (layout.n_times() as f64 * g.dot(&(&sm * &g))).max(0.0);
    Ok(WeightedVariance {
        first,
        second,
        degenerate: psi_hat_s.iter().all(|&v| v == 0.0),
    })
}

/// Default cohort-average weights `ψ_rt = 1/(T-r+1)` over every cell.
pub fn cohort_average_psi(layout: &DesignLayout) -> AttTable {
    let mut w = BTreeMap::new();
    for &r in layout.cohorts() {
        w.extend(crate::effects::cohort_weights(layout, r));
    }
    w
}

/// `(√a + √b)²`.
pub fn var_conservative(a: f64, b: f64) -> VarianceEstimate {
    let (a, b) = (a.max(0.0), b.max(0.0));
    VarianceEstimate {
        value: a + b + 2.0 * (a * b).sqrt(),
        kind: VarianceKind::WeightedConservative,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Interval {
    Bounds { low: f64, high: f64 },
    Degenerate,
}

/// `estimate ∓ Φ⁻¹(1 - α/2) √(v/nt)`.
pub fn conf_interval(estimate: f64, variance: &VarianceEstimate, nt: usize, alpha: f64) -> Interval {
    if variance.degenerate {
        return Interval::Degenerate;
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = z * (variance.value / nt as f64).sqrt();
    Interval::Bounds {
        low: estimate - half,
        high: estimate + half,
    }
}

pub fn standard_error(variance: &VarianceEstimate, nt: usize) -> f64 {
    (variance.value / nt as f64).sqrt()
}

/// Standard normal cdf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, refined with one Newton step on the cdf.
pub fn normal_quantile(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    if u == 0.5 {
        return 0.0;
    }
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u);
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if pdf > 0.0 {
        x - (normal_cdf(x) - u) / pdf
    } else {
        x
    }
}
