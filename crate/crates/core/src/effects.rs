//! Coefficient blocks of a fit and the treatment-effect estimates built from
//! them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::DesignLayout;
use crate::panel::CohortCounts;
use crate::solver::BridgeFit;

#[derive(Debug, Error, PartialEq)]
pub enum EffectsError {
    #[error("coefficient vector has length {got}, layout expects {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("weight key (r={r}, t={t}) is not a treated cohort-time cell")]
    UnknownKey { r: usize, t: usize },
    #[error("no treated units; cohort shares are undefined")]
    NoTreatedUnits,
    #[error("(r={r}, t={t}) is not a treated cohort-time cell")]
    CohortTimeOutOfRange { r: usize, t: usize },
    #[error("covariate vector has length {got}, expected {expected}")]
    CovariateLength { got: usize, expected: usize },
    #[error("propensity for cohort {0} is missing or invalid")]
    BadPropensity(usize),
}

/// `β̂` split by the canonical layout. Matrices are indexed
/// `[(cohort or time or τ position), covariate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaBlocks {
    pub nu: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub zeta: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub tau: Vec<f64>,
    pub rho: DMatrix<f64>,
}

pub fn split_beta(beta: &[f64], layout: &DesignLayout) -> Result<BetaBlocks, EffectsError> {
    if beta.len() != layout.p() {
        return Err(EffectsError::LayoutMismatch {
            got: beta.len(),
            expected: layout.p(),
        });
    }
    let o = layout.offsets();
    let r = layout.n_cohorts();
    let tm1 = layout.n_times() - 1;
    let d = layout.n_covariates();
    let w = layout.w_count();
    // interaction blocks are grouped by covariate
    let grouped = |start: usize, len: usize| {
        DMatrix::from_fn(len, d, |i, j| beta[start + j * len + i])
    };
    Ok(BetaBlocks {
        nu: beta[o.cohort_fe..o.cohort_fe + r].to_vec(),
        gamma: beta[o.time_fe..o.time_fe + tm1].to_vec(),
        kappa: beta[o.covariates..o.covariates + d].to_vec(),
        zeta: grouped(o.cohort_cov, r),
        xi: grouped(o.time_cov, tm1),
        tau: beta[o.treatment..o.treatment + w].to_vec(),
        rho: grouped(o.treatment_cov, w),
    })
}

pub fn recover_beta_blocks(fit: &BridgeFit, layout: &DesignLayout) -> Result<BetaBlocks, EffectsError> {
    split_beta(&fit.beta_hat, layout)
}

pub type AttTable = BTreeMap<(usize, usize), f64>;

/// `τ̂_ATT(r,t)` read from the τ block of `β`.
pub fn att_from_beta(beta: &[f64], layout: &DesignLayout) -> Result<AttTable, EffectsError> {
    let blocks = split_beta(beta, layout)?;
    Ok(layout
        .tau_cells()
        .into_iter()
        .zip(blocks.tau)
        .collect())
}

pub fn att_point(fit: &BridgeFit, layout: &DesignLayout) -> Result<AttTable, EffectsError> {
    att_from_beta(&fit.beta_hat, layout)
}

/// Equal-time weights `ψ_rt = 1/(T-r+1)` for one cohort.
pub fn cohort_weights(layout: &DesignLayout, r: usize) -> AttTable {
    let t_max = layout.n_times();
    (r..=t_max)
        .map(|t| ((r, t), 1.0 / (t_max - r + 1) as f64))
        .collect()
}

pub fn cohort_att(att: &AttTable, layout: &DesignLayout) -> BTreeMap<usize, f64> {
    layout
        .cohorts()
        .iter()
        .map(|&r| {
            let w = cohort_weights(layout, r);
            (r, aggregate_fixed(att, &w).expect("cohort cells are in the table"))
        })
        .collect()
}

/// `Σ ψ_rt τ̂(r,t)`.
pub fn aggregate_fixed(att: &AttTable, weights: &AttTable) -> Result<f64, EffectsError> {
    let mut s = 0.0;
    for (&(r, t), &w) in weights {
        let v = att.get(&(r, t)).ok_or(EffectsError::UnknownKey { r, t })?;
        s += w * v;
    }
    Ok(s)
}

/// Default shares `N_r / N_τ` keyed by cohort.
pub fn default_shares(counts: &CohortCounts) -> Result<BTreeMap<usize, f64>, EffectsError> {
    let shares = counts.treated_shares().ok_or(EffectsError::NoTreatedUnits)?;
    Ok(counts
        .per_cohort
        .iter()
        .map(|&(r, _)| r)
        .zip(shares)
        .collect())
}

/// Overall weights `ψ_rt f_r` for the given shares.
pub fn overall_weights(layout: &DesignLayout, shares: &BTreeMap<usize, f64>) -> AttTable {
    let mut w = AttTable::new();
    for &r in layout.cohorts() {
        let f = shares.get(&r).copied().unwrap_or(0.0);
        for (k, v) in cohort_weights(layout, r) {
            w.insert(k, v * f);
        }
    }
    w
}

/// `Σ_r f_r Σ_t ψ_rt τ̂(r,t)` with default shares and cohort-average `ψ`.
/// `counts` may come from an independent sample.
pub fn aggregate_weighted(
    att: &AttTable,
    counts: &CohortCounts,
    layout: &DesignLayout,
) -> Result<f64, EffectsError> {
    let shares = default_shares(counts)?;
    aggregate_fixed(att, &overall_weights(layout, &shares))
}

pub fn aggregate_with_shares(
    att: &AttTable,
    shares: &BTreeMap<usize, f64>,
    layout: &DesignLayout,
) -> Result<f64, EffectsError> {
    aggregate_fixed(att, &overall_weights(layout, shares))
}

/// `τ̂_rt + (x - X̄_r)ᵀ ρ̂_rt` from a coefficient vector.
pub fn catt_from_beta(
    beta: &[f64],
    layout: &DesignLayout,
    r: usize,
    t: usize,
    x: &[f64],
) -> Result<f64, EffectsError> {
    let d = layout.n_covariates();
    if x.len() != d {
        return Err(EffectsError::CovariateLength {
            got: x.len(),
            expected: d,
        });
    }
    let pos = layout
        .tau_position(r, t)
        .ok_or(EffectsError::CohortTimeOutOfRange { r, t })?;
    let k = layout.cohort_position(r).expect("cohort of a valid cell");
    if beta.len() != layout.p() {
        return Err(EffectsError::LayoutMismatch {
            got: beta.len(),
            expected: layout.p(),
        });
    }
    let means = layout.cohort_means();
    let mut v = beta[layout.offsets().treatment + pos];
    for j in 0..d {
        let rho = beta[layout.rho_index(r, t, j).expect("valid cell")];
        v += (x[j] - means[(k, j)]) * rho;
    }
    Ok(v)
}

pub fn catt_point(
    fit: &BridgeFit,
    layout: &DesignLayout,
    r: usize,
    t: usize,
    x: &[f64],
) -> Result<f64, EffectsError> {
    catt_from_beta(&fit.beta_hat, layout, r, t, x)
}

/// Probability-weighted CATT with user-supplied propensities `π̂_r(x)`
/// (keyed by cohort) and cohort-average `ψ`.
pub fn catt_weighted(
    fit: &BridgeFit,
    layout: &DesignLayout,
    x: &[f64],
    propensities: &BTreeMap<usize, f64>,
) -> Result<f64, EffectsError> {
    let mut total = 0.0;
    for &r in layout.cohorts() {
        match propensities.get(&r) {
            Some(&p) if p.is_finite() && p >= 0.0 => total += p,
            _ => return Err(EffectsError::BadPropensity(r)),
        }
    }
    if !(total > 0.0) {
        return Err(EffectsError::NoTreatedUnits);
    }
    let mut s = 0.0;
    for &r in layout.cohorts() {
        let f = propensities[&r] / total;
        for ((_, t), w) in cohort_weights(layout, r) {
            s += w * f * catt_point(fit, layout, r, t, x)?;
        }
    }
    Ok(s)
}

/// Nonzero `ξ̂` entries as `(t, covariate index)`; the diagnostic passes
/// when the list is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiunDiagnostic {
    pub holds: bool,
    pub violations: Vec<(usize, usize)>,
}

pub fn ciun_diagnostic(fit: &BridgeFit, layout: &DesignLayout) -> Result<CiunDiagnostic, EffectsError> {
    let blocks = recover_beta_blocks(fit, layout)?;
    let mut violations = Vec::new();
    for j in 0..layout.n_covariates() {
        for (i, t) in (2..=layout.n_times()).enumerate() {
            if blocks.xi[(i, j)] != 0.0 {
                violations.push((t, j));
            }
        }
    }
    violations.sort();
    Ok(CiunDiagnostic {
        holds: violations.is_empty(),
        violations,
    })
}

/// One estimate with optional standard error and interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub degenerate: bool,
}

impl EstimateEntry {
    pub fn point(estimate: f64) -> Self {
        Self {
            estimate,
            se: None,
            ci_low: None,
            ci_high: None,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttEntry {
    pub r: usize,
    pub t: usize,
    pub r_label: i64,
    pub t_label: i64,
    #[serde(flatten)]
    pub value: EstimateEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub r: usize,
    pub r_label: i64,
    pub n_units: usize,
    #[serde(flatten)]
    pub value: EstimateEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEntry {
    #[serde(flatten)]
    pub value: EstimateEntry,
    /// `conservative` or `split_sample`.
    pub variance_kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CattEntry {
    pub r: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub att: Vec<AttEntry>,
    pub cohort_att: Vec<CohortEntry>,
    pub overall: OverallEntry,
    pub ciun: bool,
    pub ciun_violations: Vec<(usize, usize)>,
    /// Cohorts whose average effect is estimated as exactly zero.
    pub zeroed_cohorts: Vec<usize>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catt: Option<Vec<CattEntry>>,
}
