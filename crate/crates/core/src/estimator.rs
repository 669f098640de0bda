//! End-to-end estimation: design, variance components, GLS transform,
//! penalized path with BIC, effects and their intervals.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{build_design, center_response_and_columns, DesignError, DesignLayout};
use crate::effects::{
    att_from_beta, cohort_weights, default_shares, overall_weights, AttEntry, AttTable,
    CiunDiagnostic, CohortEntry, EffectsError, EffectsReport, EstimateEntry, OverallEntry,
};
use crate::fusion::{build_fusion, FusionMatrix};
use crate::gls::{
    estimate_variance_components, gls_transform_matrix, gls_transform_vec, GlsError,
    VarianceComponents,
};
use crate::inference::{
    cohort_average_psi, conf_interval, psi_vector_fixed, selected_cov_reparam, standard_error,
    var_fixed, var_weighted, InferenceError, Interval, SelectedCovariance, VarianceEstimate,
};
use crate::panel::{cohort_counts, CohortCounts, PanelDataset, PanelError};
use crate::solver::{BridgeFit, BridgeProblem, PathPoint, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("panel: {0}")]
    Panel(#[from] PanelError),
    #[error("design: {0}")]
    Design(#[from] DesignError),
    #[error("variance components: {0}")]
    Gls(#[from] GlsError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("effects: {0}")]
    Effects(#[from] EffectsError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("split counts: {0}")]
    SplitCounts(String),
    #[error("invalid setting: {0}")]
    Config(String),
}

/// Which differences matrix to penalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionChoice {
    #[default]
    Staggered,
    /// `D = I`: bridge regression directly on `β`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub solver: SolverConfig,
    /// Overrides for the variance components; missing ones are estimated.
    pub sigma_sq: Option<f64>,
    pub sigma_c_sq: Option<f64>,
    pub alpha: f64,
    pub fusion: FusionChoice,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            sigma_sq: None,
            sigma_c_sq: None,
            alpha: 0.05,
            fusion: FusionChoice::Staggered,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        self.solver.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EstimateError::Config("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    Supplied,
    Estimated,
    Mixed,
}

/// The transformed, centered regression ready for fitting.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub layout: DesignLayout,
    pub fusion: FusionMatrix,
    pub vc: VarianceComponents,
    pub vc_source: VarianceSource,
    /// GLS-transformed, centered `Z̃`.
    pub design: DMatrix<f64>,
    /// GLS-transformed, centered response.
    pub response: DVector<f64>,
    /// `design · D⁻¹`.
    pub reparam: DMatrix<f64>,
    pub counts: CohortCounts,
    pub n_times: usize,
}

impl PreparedModel {
    pub fn nt(&self) -> usize {
        self.design.nrows()
    }
}

pub fn resolve_variance(
    raw_design: &DMatrix<f64>,
    raw_response: &DVector<f64>,
    n_times: usize,
    sigma_sq: Option<f64>,
    sigma_c_sq: Option<f64>,
) -> Result<(VarianceComponents, VarianceSource), EstimateError> {
    match (sigma_sq, sigma_c_sq) {
        (Some(s), Some(c)) => Ok((VarianceComponents::new(s, c)?, VarianceSource::Supplied)),
        (s, c) => {
            let est = estimate_variance_components(raw_design, raw_response, n_times)?;
            let source = if s.is_some() || c.is_some() {
                VarianceSource::Mixed
            } else {
                VarianceSource::Estimated
            };
            let vc = VarianceComponents::new(s.unwrap_or(est.sigma_sq), c.unwrap_or(est.sigma_c_sq))?;
            Ok((vc, source))
        }
    }
}

/// Builds the design, resolves the variance components and applies the
/// GLS transform and centering.
pub fn prepare(data: &PanelDataset, config: &EstimatorConfig) -> Result<PreparedModel, EstimateError> {
    config.validate()?;
    let dm = build_design(data)?;
    let y = DVector::from_vec(data.stacked_response());
    let t = data.n_times();
    let (vc, vc_source) = resolve_variance(&dm.values, &y, t, config.sigma_sq, config.sigma_c_sq)?;
    prepare_with(dm.values, y, dm.layout, vc, vc_source, cohort_counts(data), config.fusion)
}

pub fn prepare_with(
    raw_design: DMatrix<f64>,
    raw_response: DVector<f64>,
    layout: DesignLayout,
    vc: VarianceComponents,
    vc_source: VarianceSource,
    counts: CohortCounts,
    fusion: FusionChoice,
) -> Result<PreparedModel, EstimateError> {
    let t = layout.n_times();
    let zt = gls_transform_matrix(&raw_design, t, &vc)?;
    drop(raw_design);
    let yt = gls_transform_vec(&raw_response, t, &vc)?;
    let centered = center_response_and_columns(&zt, &yt);
    drop(zt);
    let fusion = match fusion {
        FusionChoice::Staggered => build_fusion(&layout),
        FusionChoice::Identity => FusionMatrix::identity(&layout),
    };
    let reparam = match fusion_is_identity(&fusion) {
        true => centered.design.clone(),
        false => fusion.d_inv().left_mul_dense(&centered.design),
    };
    Ok(PreparedModel {
        layout,
        fusion,
        vc,
        vc_source,
        design: centered.design,
        response: centered.response,
        reparam,
        counts,
        n_times: t,
    })
}

fn fusion_is_identity(f: &FusionMatrix) -> bool {
    f.d_inv().nnz() == f.p() && (0..f.p()).all(|i| f.d_inv().get(i, i) == 1.0)
}

/// A fitted model with the selected path point.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub prepared: PreparedModel,
    pub fit: BridgeFit,
    pub path: Vec<PathPoint>,
}

pub fn fit_prepared(prepared: PreparedModel, solver: &SolverConfig) -> Result<FittedModel, EstimateError> {
    let problem = BridgeProblem::with_fusion(&prepared.reparam, &prepared.response, &prepared.fusion, solver)?;
    let (fit, path) = problem.fit_path_bic(solver)?;
    drop(problem);
    Ok(FittedModel { prepared, fit, path })
}

pub fn fit(data: &PanelDataset, config: &EstimatorConfig) -> Result<FittedModel, EstimateError> {
    let prepared = prepare(data, config)?;
    fit_prepared(prepared, &config.solver)
}

/// Outcome of an interval computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inferred {
    pub estimate: f64,
    pub variance: Option<VarianceEstimate>,
    pub interval: Option<Interval>,
}

impl Inferred {
    pub fn entry(&self, nt: usize) -> EstimateEntry {
        let mut e = EstimateEntry::point(self.estimate);
        if let Some(v) = &self.variance {
            e.degenerate = v.degenerate;
            if !v.degenerate {
                e.se = Some(standard_error(v, nt));
            }
        }
        if let Some(Interval::Bounds { low, high }) = self.interval {
            e.ci_low = Some(low);
            e.ci_high = Some(high);
        }
        e
    }

    /// Whether a non-degenerate interval covers `truth`.
    pub fn covers(&self, truth: f64) -> Option<bool> {
        match self.interval {
            Some(Interval::Bounds { low, high }) => Some(low <= truth && truth <= high),
            _ => None,
        }
    }
}

/// How the overall interval accounts for estimated cohort shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallMode {
    /// Shares from the estimation sample, `(√a + √b)²` variance.
    Conservative,
    /// Shares from an independent sample, `a + b` variance.
    SplitSample,
}

impl FittedModel {
    pub fn att(&self) -> AttTable {
        att_from_beta(&self.fit.beta_hat, &self.prepared.layout).expect("fit matches its layout")
    }

    /// Covariance of the selected reparameterized columns; `None` when the
    /// selection is empty.
    pub fn selected_cov(&self) -> Result<Option<SelectedCovariance>, EstimateError> {
        if self.fit.selected.is_empty() {
            return Ok(None);
        }
        Ok(Some(selected_cov_reparam(&self.prepared.reparam, &self.fit.selected)?))
    }

    fn degenerate_variance(kind: crate::inference::VarianceKind) -> VarianceEstimate {
        VarianceEstimate {
            value: 0.0,
            kind,
            degenerate: true,
        }
    }

    /// Fixed-weight aggregate `Σ ψ_rt τ̂(r,t)` with its interval.
    pub fn infer_fixed(
        &self,
        weights: &AttTable,
        cov: Option<&SelectedCovariance>,
        alpha: f64,
    ) -> Result<Inferred, EstimateError> {
        let att = self.att();
        let estimate = crate::effects::aggregate_fixed(&att, weights)?;
        let variance = match cov {
            Some(c) => {
                let psi = psi_vector_fixed(weights, &self.prepared.fusion, &self.prepared.layout)?;
                var_fixed(&psi, c, self.prepared.vc.sigma_sq)?
            }
            None => Self::degenerate_variance(crate::inference::VarianceKind::Fixed),
        };
        let interval = conf_interval(estimate, &variance, self.prepared.nt(), alpha);
        Ok(Inferred {
            estimate,
            variance: Some(variance),
            interval: Some(interval),
        })
    }

    /// Share-weighted overall ATT. In split-sample mode `counts` must come
    /// from an independent draw of cohort assignments.
    pub fn infer_overall(
        &self,
        counts: &CohortCounts,
        mode: OverallMode,
        cov: Option<&SelectedCovariance>,
        alpha: f64,
    ) -> Result<Inferred, EstimateError> {
        let layout = &self.prepared.layout;
        let shares = default_shares(counts)?;
        let estimate = crate::effects::aggregate_fixed(&self.att(), &overall_weights(layout, &shares))?;
        let variance = match cov {
            Some(c) => {
                let wv = var_weighted(
                    &self.fit.theta_hat,
                    layout,
                    &self.prepared.fusion,
                    c,
                    counts,
                    &cohort_average_psi(layout),
                    self.prepared.vc.sigma_sq,
                )?;
                match mode {
                    OverallMode::Conservative => wv.conservative(),
                    OverallMode::SplitSample => wv.split(),
                }
            }
            None => Self::degenerate_variance(match mode {
                OverallMode::Conservative => crate::inference::VarianceKind::WeightedConservative,
                OverallMode::SplitSample => crate::inference::VarianceKind::WeightedSplit,
            }),
        };
        let interval = conf_interval(estimate, &variance, self.prepared.nt(), alpha);
        Ok(Inferred {
            estimate,
            variance: Some(variance),
            interval: Some(interval),
        })
    }

    pub fn ciun(&self) -> CiunDiagnostic {
        crate::effects::ciun_diagnostic(&self.fit, &self.prepared.layout).expect("fit matches its layout")
    }
}

/// Everything `estimate` produces.
#[derive(Debug, Clone)]
pub struct EstimationOutput {
    pub model: FittedModel,
    pub report: EffectsReport,
    /// Fixed-weight aggregate for user-supplied weights, when given.
    pub custom: Option<EstimateEntry>,
}

/// Full pipeline with the default reporting: per-cell, per-cohort and
/// overall effects.
pub fn estimate(
    data: &PanelDataset,
    config: &EstimatorConfig,
    split_counts: Option<&CohortCounts>,
    custom_weights: Option<&AttTable>,
) -> Result<EstimationOutput, EstimateError> {
    let model = fit(data, config)?;
    let report_parts = build_report(&model, data, config.alpha, split_counts, custom_weights)?;
    Ok(EstimationOutput {
        model,
        report: report_parts.0,
        custom: report_parts.1,
    })
}

fn build_report(
    model: &FittedModel,
    data: &PanelDataset,
    alpha: f64,
    split_counts: Option<&CohortCounts>,
    custom_weights: Option<&AttTable>,
) -> Result<(EffectsReport, Option<EstimateEntry>), EstimateError> {
    let layout = &model.prepared.layout;
    let nt = model.prepared.nt();
    let mut notes = Vec::new();
    let cov = match model.selected_cov() {
        Ok(c) => c,
        Err(EstimateError::Inference(InferenceError::SingularCovariance)) => {
            notes.push("covariance of the selected columns is singular; standard errors omitted".into());
            None
        }
        Err(e) => return Err(e),
    };
    let have_se = cov.is_some();
    if model.fit.selected.is_empty() {
        notes.push("no coefficients selected; every effect is estimated as zero".into());
    }
    let strip = |mut e: EstimateEntry| {
        if !have_se && !model.fit.selected.is_empty() {
            e.se = None;
            e.ci_low = None;
            e.ci_high = None;
            e.degenerate = false;
        }
        e
    };

    let mut att_entries = Vec::new();
    for (r, t) in layout.tau_cells() {
        let w: AttTable = [((r, t), 1.0)].into_iter().collect();
        let inf = model.infer_fixed(&w, cov.as_ref(), alpha)?;
        att_entries.push(AttEntry {
            r,
            t,
            r_label: data.time_label(r),
            t_label: data.time_label(t),
            value: strip(inf.entry(nt)),
        });
    }

    let mut cohort_entries = Vec::new();
    let mut zeroed = Vec::new();
    for &r in layout.cohorts() {
        let inf = model.infer_fixed(&cohort_weights(layout, r), cov.as_ref(), alpha)?;
        if inf.estimate == 0.0 {
            zeroed.push(r);
        }
        cohort_entries.push(CohortEntry {
            r,
            r_label: data.time_label(r),
            n_units: model.prepared.counts.count(r).unwrap_or(0),
            value: strip(inf.entry(nt)),
        });
    }
    if zeroed.is_empty() {
        notes.push("no restriction zeroed a cohort average effect".into());
    }

    let (counts, mode, kind) = match split_counts {
        Some(c) => (c, OverallMode::SplitSample, "split_sample"),
        None => (&model.prepared.counts, OverallMode::Conservative, "conservative"),
    };
    let overall = model.infer_overall(counts, mode, cov.as_ref(), alpha)?;

    let custom = match custom_weights {
        Some(w) => Some(strip(model.infer_fixed(w, cov.as_ref(), alpha)?.entry(nt))),
        None => None,
    };

    let ciun = model.ciun();
    notes.push(format!(
        "variance components ({:?}): sigma_sq = {:.6}, sigma_c_sq = {:.6}",
        model.prepared.vc_source, model.prepared.vc.sigma_sq, model.prepared.vc.sigma_c_sq
    ));
    if !model.fit.converged {
        notes.push("solver hit its iteration cap at the selected penalty".into());
    }
    Ok((
        EffectsReport {
            att: att_entries,
            cohort_att: cohort_entries,
            overall: OverallEntry {
                value: strip(overall.entry(nt)),
                variance_kind: kind.into(),
            },
            ciun: ciun.holds,
            ciun_violations: ciun.violations,
            zeroed_cohorts: zeroed,
            notes,
            catt: None,
        },
        custom,
    ))
}

/// Reads cohort counts from an independent sample: `cohort,count` rows,
/// cohort given by its time label, 0 for never treated.
pub fn load_split_counts<R: Read>(reader: R, data: &PanelDataset) -> Result<CohortCounts, EstimateError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let bad = |m: String| EstimateError::SplitCounts(m);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let (ci, ni) = (col("cohort")?, col("count")?);
    let first = data.time_labels()[0];
    let mut by_cohort: BTreeMap<usize, usize> = BTreeMap::new();
    let mut never = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = k + 2;
        let label: i64 = rec
            .get(ci)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad(format!("row {row}: bad cohort")))?;
        let count: usize = rec
            .get(ni)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad(format!("row {row}: bad count")))?;
        if label == 0 {
            never += count;
            continue;
        }
        let t = label - first + 1;
        if t < 1 || !data.cohorts().contains(&(t as usize)) {
            return Err(bad(format!("row {row}: cohort {label} is not in the panel")));
        }
        *by_cohort.entry(t as usize).or_default() += count;
    }
    let per = data
        .cohorts()
        .iter()
        .map(|&r| (r, by_cohort.get(&r).copied().unwrap_or(0)))
        .collect();
    let counts = CohortCounts::new(never, per);
    if counts.treated == 0 {
        return Err(bad("no treated units".into()));
    }
    Ok(counts)
}

/// Reads user weights: `cohort,time,weight` rows using time labels.
pub fn load_weights<R: Read>(reader: R, data: &PanelDataset) -> Result<AttTable, EstimateError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let bad = |m: String| EstimateError::Config(format!("weights: {m}"));
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let (ci, ti, wi) = (col("cohort")?, col("time")?, col("weight")?);
    let first = data.time_labels()[0];
    let mut out = AttTable::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = k + 2;
        let int = |c: usize| -> Result<i64, EstimateError> {
            rec.get(c)
                .unwrap_or("")
                .parse()
                .map_err(|_| bad(format!("row {row}: bad integer")))
        };
        let w: f64 = rec
            .get(wi)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad(format!("row {row}: bad weight")))?;
        if !w.is_finite() {
            return Err(bad(format!("row {row}: non-finite weight")));
        }
        let r = int(ci)? - first + 1;
        let t = int(ti)? - first + 1;
        if r < 1 || t < 1 {
            return Err(bad(format!("row {row}: time before the panel")));
        }
        *out.entry((r as usize, t as usize)).or_default() += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_panel(noise: bool) -> PanelDataset {
        // 8 units, T = 4, cohorts {2, 3}, one covariate
        let assignment = vec![0, 0, 0, 2, 2, 3, 3, 3];
        let x = DMatrix::from_fn(8, 1, |i, _| (i as f64 * 0.37).sin());
        let y = DMatrix::from_fn(8, 4, |i, t| {
            let w = assignment[i];
            let treat = if w > 0 && t + 1 >= w { 2.0 } else { 0.0 };
            let e = if noise { ((i * 7 + t * 13) % 5) as f64 * 0.1 } else { 0.0 };
            1.0 + t as f64 * 0.5 + x[(i, 0)] + treat + e
        });
        PanelDataset::new(assignment, x, y).unwrap()
    }

    #[test]
    fn estimate_runs_and_is_consistent() {
        let data = small_panel(true);
        let cfg = EstimatorConfig {
            sigma_sq: Some(1.0),
            sigma_c_sq: Some(0.5),
            ..Default::default()
        };
        let out = estimate(&data, &cfg, None, None).unwrap();
        assert_eq!(out.report.cohort_att.len(), 2);
        assert_eq!(out.report.att.len(), 3 + 2);
        let model = &out.model;
        let att = model.att();
        let ca = crate::effects::cohort_att(&att, &model.prepared.layout);
        for c in &out.report.cohort_att {
            assert!((c.value.estimate - ca[&c.r]).abs() < 1e-12);
        }
        let shares = default_shares(&model.prepared.counts).unwrap();
        let overall: f64 = ca.iter().map(|(r, v)| shares[r] * v).sum();
        assert!((out.report.overall.value.estimate - overall).abs() < 1e-12);
        if let (Some(lo), Some(hi)) = (out.report.overall.value.ci_low, out.report.overall.value.ci_high) {
            assert!(lo <= out.report.overall.value.estimate && out.report.overall.value.estimate <= hi);
        }
    }

    #[test]
    fn split_counts_parse() {
        let data = small_panel(false);
        let c = load_split_counts("cohort,count\n0,4\n2,3\n3,1\n".as_bytes(), &data).unwrap();
        assert_eq!(c.never_treated, 4);
        assert_eq!(c.per_cohort, vec![(2, 3), (3, 1)]);
        assert!(load_split_counts("cohort,count\n4,1\n".as_bytes(), &data).is_err());
        let w = load_weights("cohort,time,weight\n2,3,0.5\n".as_bytes(), &data).unwrap();
        assert_eq!(w[&(2, 3)], 0.5);
    }
}
