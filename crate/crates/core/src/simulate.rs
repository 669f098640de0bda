//! Monte Carlo studies: data-generating process, competitor estimators and
//! aggregated metrics.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{build_design, center_response_and_columns, DesignError, DesignLayout};
use crate::effects::{att_from_beta, cohort_att, split_beta, AttTable};
use crate::estimator::{
    fit_prepared, prepare_with, resolve_variance, EstimateError, FittedModel, FusionChoice,
    OverallMode, VarianceSource,
};
use crate::fusion::build_fusion;
use crate::gls::{gls_transform_matrix, gls_transform_vec, VarianceComponents};
use crate::panel::{cohort_counts, CohortCounts, PanelDataset, PanelError};
use crate::solver::{BridgeProblem, SolverConfig, SolverError};

const MAX_REDRAWS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("no assignment with every group nonempty after {0} draws")]
    RedrawLimitExceeded(usize),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("panel: {0}")]
    Panel(#[from] PanelError),
    #[error("design: {0}")]
    Design(#[from] DesignError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_units: usize,
    pub n_times: usize,
    pub cohorts: Vec<usize>,
    pub d: usize,
    pub theta_density: f64,
    pub theta_magnitude: f64,
    pub sign_positive_prob: f64,
    pub sigma_sq: f64,
    pub sigma_c_sq: f64,
    /// Over `{0} ∪ cohorts`; uniform when absent.
    pub assignment_probs: Option<Vec<f64>>,
    pub replications: usize,
    pub seed: u64,
    pub alpha: f64,
    pub solver: SolverConfig,
    /// Estimate the variance components per replicate instead of using the
    /// true values.
    pub estimate_variance: bool,
    /// Fit competitors on the untransformed (centered) data.
    pub competitors_raw: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::study2_desk()
    }
}

impl SimConfig {
    pub fn study1() -> Self {
        Self {
            n_units: 120,
            n_times: 30,
            cohorts: (2..=6).collect(),
            d: 12,
            theta_density: 0.1,
            theta_magnitude: 2.0,
            sign_positive_prob: 0.6,
            sigma_sq: 5.0,
            sigma_c_sq: 5.0,
            assignment_probs: None,
            replications: 700,
            seed: 1,
            alpha: 0.05,
            solver: SolverConfig::default(),
            estimate_variance: false,
            competitors_raw: false,
        }
    }

    pub fn study1_reduced() -> Self {
        Self {
            n_times: 10,
            d: 6,
            replications: 100,
            ..Self::study1()
        }
    }

    pub fn study2() -> Self {
        Self {
            n_units: 1200,
            n_times: 5,
            cohorts: vec![2, 3, 4],
            d: 2,
            theta_density: 0.5,
            ..Self::study1()
        }
    }

    pub fn study2_desk() -> Self {
        Self {
            n_units: 300,
            replications: 200,
            ..Self::study2()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "study1" => Some(Self::study1()),
            "study1-reduced" => Some(Self::study1_reduced()),
            "study2" => Some(Self::study2()),
            "study2-desk" => Some(Self::study2_desk()),
            _ => None,
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        match &self.assignment_probs {
            Some(p) => p.clone(),
            None => vec![1.0 / (self.cohorts.len() + 1) as f64; self.cohorts.len() + 1],
        }
    }

    pub fn layout(&self) -> Result<DesignLayout, SimError> {
        Ok(DesignLayout::new(self.n_times, &self.cohorts, self.d)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.replications == 0 {
            return bad("replications must be positive");
        }
        if self.n_units < self.cohorts.len() + 1 {
            return bad("too few units to populate every group");
        }
        self.layout()?;
        let p = self.probabilities();
        if p.len() != self.cohorts.len() + 1 {
            return bad("assignment_probs needs one entry per cohort plus never treated");
        }
        if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("assignment probabilities must be positive and sum to 1");
        }
        for (name, v) in [
            ("theta_density", self.theta_density),
            ("sign_positive_prob", self.sign_positive_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.sigma_sq >= 0.0 && self.sigma_c_sq >= 0.0) {
            return bad("variances must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        self.solver.validate()?;
        Ok(())
    }
}

/// Per-replicate RNG stream; stream 0 is reserved for the coefficients.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Sparse `θ*` and `β* = D⁻¹θ*`.
pub fn gen_coefficients(layout: &DesignLayout, config: &SimConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let theta: Vec<f64> = (0..layout.p())
        .map(|_| {
            let on = rng.random::<f64>() < config.theta_density;
            let positive = rng.random::<f64>() < config.sign_positive_prob;
            match (on, positive) {
                (false, _) => 0.0,
                (true, true) => config.theta_magnitude,
                (true, false) => -config.theta_magnitude,
            }
        })
        .collect();
    let beta = build_fusion(layout).invert(&theta);
    (theta, beta)
}

/// True effects of one generated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub att: AttTable,
    pub cohort_att: BTreeMap<usize, f64>,
    /// `Σ_r π̃_r τ(r)` with population cohort shares.
    pub overall_att: f64,
}

pub fn population_overall(cohort_att: &BTreeMap<usize, f64>, cohorts: &[usize], probs: &[f64]) -> f64 {
    let treated: f64 = probs[1..].iter().sum();
    cohorts
        .iter()
        .zip(&probs[1..])
        .map(|(r, p)| p / treated * cohort_att[r])
        .sum()
}

pub fn truth_for(layout: &DesignLayout, theta: &[f64], beta: &[f64], probs: &[f64]) -> Truth {
    let att = att_from_beta(beta, layout).expect("beta matches layout");
    let ca = cohort_att(&att, layout);
    let overall = population_overall(&ca, layout.cohorts(), probs);
    Truth {
        theta: theta.to_vec(),
        beta: beta.to_vec(),
        att,
        cohort_att: ca,
        overall_att: overall,
    }
}

/// Multinomial assignment, redrawn until every group is nonempty.
pub fn draw_assignment<R: Rng>(
    rng: &mut R,
    n: usize,
    cohorts: &[usize],
    probs: &[f64],
) -> Result<Vec<usize>, SimError> {
    let dist = WeightedIndex::new(probs).map_err(|e| SimError::Config(e.to_string()))?;
    let labels: Vec<usize> = std::iter::once(0).chain(cohorts.iter().copied()).collect();
    for _ in 0..MAX_REDRAWS {
        let mut seen = vec![false; labels.len()];
        let w: Vec<usize> = (0..n)
            .map(|_| {
                let k = dist.sample(rng);
                seen[k] = true;
                labels[k]
            })
            .collect();
        if seen.iter().all(|&s| s) {
            return Ok(w);
        }
    }
    Err(SimError::RedrawLimitExceeded(MAX_REDRAWS))
}

/// Cohort counts of an independent assignment-only sample of size `n`.
pub fn draw_split_counts<R: Rng>(
    rng: &mut R,
    n: usize,
    cohorts: &[usize],
    probs: &[f64],
) -> Result<CohortCounts, SimError> {
    let dist = WeightedIndex::new(probs).map_err(|e| SimError::Config(e.to_string()))?;
    for _ in 0..MAX_REDRAWS {
        let mut tally = vec![0usize; probs.len()];
        for _ in 0..n {
            tally[dist.sample(rng)] += 1;
        }
        if tally[1..].iter().any(|&c| c > 0) {
            let per = cohorts.iter().copied().zip(tally[1..].iter().copied()).collect();
            return Ok(CohortCounts::new(tally[0], per));
        }
    }
    Err(SimError::RedrawLimitExceeded(MAX_REDRAWS))
}

/// One panel from the DGP `ỹ = Z̃β* + c ⊗ 1 + u`.
pub fn gen_panel<R: Rng>(
    config: &SimConfig,
    theta_star: &[f64],
    beta_star: &[f64],
    rng: &mut R,
) -> Result<(PanelDataset, Truth), SimError> {
    let (n, t, d) = (config.n_units, config.n_times, config.d);
    let probs = config.probabilities();
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = draw_assignment(rng, n, &config.cohorts, &probs)?;
    let skeleton = PanelDataset::new(w, x, DMatrix::zeros(n, t))?;
    let design = build_design(&skeleton)?;
    let mean = &design.values * DVector::from_column_slice(beta_star);
    let unit = Normal::new(0.0, config.sigma_c_sq.sqrt()).expect("nonnegative variance");
    let idio = Normal::new(0.0, config.sigma_sq.sqrt()).expect("nonnegative variance");
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        let c = if config.sigma_c_sq > 0.0 { unit.sample(rng) } else { 0.0 };
        for s in 0..t {
            let u = if config.sigma_sq > 0.0 { idio.sample(rng) } else { 0.0 };
            y[(i, s)] = mean[i * t + s] + c + u;
        }
    }
    let data = skeleton.with_response(y)?;
    let truth = truth_for(&design.layout, theta_star, beta_star, &probs);
    Ok((data, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Fetwfe,
    Etwfe,
    Betwfe,
    TwfeCovs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fetwfe, Method::Etwfe, Method::Betwfe, Method::TwfeCovs];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fetwfe => "FETWFE",
            Method::Etwfe => "ETWFE",
            Method::Betwfe => "BETWFE",
            Method::TwfeCovs => "TWFE_COVS",
        }
    }
}

/// Point estimates from one method on one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEstimate {
    pub cohort_att: BTreeMap<usize, f64>,
    pub overall_att: f64,
    /// `ρ̂`, when the method estimates it.
    pub rho: Option<Vec<f64>>,
}

fn estimate_from_beta(beta: &[f64], layout: &DesignLayout, counts: &CohortCounts) -> MethodEstimate {
    let att = att_from_beta(beta, layout).expect("beta matches layout");
    let ca = cohort_att(&att, layout);
    let shares = counts.treated_shares().expect("treated units present");
    let overall = layout.cohorts().iter().zip(shares).map(|(r, f)| f * ca[r]).sum();
    let rho = split_beta(beta, layout).expect("beta matches layout").rho;
    MethodEstimate {
        cohort_att: ca,
        overall_att: overall,
        rho: Some(rho.as_slice().to_vec()),
    }
}

/// `[cohort FE | time FE | X | per-cohort post-treatment dummies]`.
pub fn twfe_covs_design(data: &PanelDataset) -> DMatrix<f64> {
    let (n, t, d) = (data.n_units(), data.n_times(), data.n_covariates());
    let cohorts = data.cohorts();
    let r = cohorts.len();
    let p = 2 * r + (t - 1) + d;
    let mut z = DMatrix::zeros(n * t, p);
    for i in 0..n {
        let w = data.assignment()[i];
        let k = cohorts.iter().position(|&c| c == w);
        for s in 0..t {
            let row = i * t + s;
            if let Some(k) = k {
                z[(row, k)] = 1.0;
                if s + 1 >= w {
                    z[(row, r + (t - 1) + d + k)] = 1.0;
                }
            }
            if s >= 1 {
                z[(row, r + s - 1)] = 1.0;
            }
            for j in 0..d {
                z[(row, r + (t - 1) + j)] = data.covariates()[(i, j)];
            }
        }
    }
    z
}

/// Fits a competitor on the same panel.
pub fn competitor_fit(
    method: Method,
    data: &PanelDataset,
    vc: &VarianceComponents,
    solver: &SolverConfig,
    raw: bool,
) -> Result<MethodEstimate, SimError> {
    let t = data.n_times();
    let counts = cohort_counts(data);
    let y = DVector::from_vec(data.stacked_response());
    let transform = |z: &DMatrix<f64>| -> Result<(DMatrix<f64>, DVector<f64>), SimError> {
        if raw {
            let c = center_response_and_columns(z, &y);
            return Ok((c.design, c.response));
        }
        let zt = gls_transform_matrix(z, t, vc).map_err(EstimateError::from)?;
        let yt = gls_transform_vec(&y, t, vc).map_err(EstimateError::from)?;
        let c = center_response_and_columns(&zt, &yt);
        Ok((c.design, c.response))
    };
    match method {
        Method::Fetwfe => Err(SimError::Config("FETWFE is not a competitor".into())),
        Method::Etwfe | Method::Betwfe => {
            let dm = build_design(data)?;
            let (z, yc) = transform(&dm.values)?;
            let fit = if method == Method::Etwfe {
                BridgeProblem::new(&z, &yc, solver)?.fit(0.0, solver, None)?
            } else {
                BridgeProblem::new(&z, &yc, solver)?.fit_path_bic(solver)?.0
            };
            Ok(estimate_from_beta(&fit.beta_hat, &dm.layout, &counts))
        }
        Method::TwfeCovs => {
            let z = twfe_covs_design(data);
            let (z, yc) = transform(&z)?;
            let fit = BridgeProblem::new(&z, &yc, solver)?.fit(0.0, solver, None)?;
            let r = data.cohorts().len();
            let off = r + (t - 1) + data.n_covariates();
            let ca: BTreeMap<usize, f64> = data
                .cohorts()
                .iter()
                .enumerate()
                .map(|(k, &c)| (c, fit.beta_hat[off + k]))
                .collect();
            let shares = counts.treated_shares().expect("treated units present");
            let overall = data.cohorts().iter().zip(shares).map(|(c, f)| f * ca[c]).sum();
            Ok(MethodEstimate {
                cohort_att: ca,
                overall_att: overall,
                rho: None,
            })
        }
    }
}

/// `(overall accuracy, recall of true zeros)`; recall is `None` when `θ*`
/// has no zeros.
pub fn selection_accuracy(theta_hat: &[f64], theta_star: &[f64]) -> (f64, Option<f64>) {
    assert_eq!(theta_hat.len(), theta_star.len());
    let p = theta_star.len();
    let agree = theta_hat
        .iter()
        .zip(theta_star)
        .filter(|(a, b)| (**a != 0.0) == (**b != 0.0))
        .count();
    let zeros: Vec<usize> = (0..p).filter(|&j| theta_star[j] == 0.0).collect();
    let recall = (!zeros.is_empty())
        .then(|| zeros.iter().filter(|&&j| theta_hat[j] == 0.0).count() as f64 / zeros.len() as f64);
    (agree as f64 / p as f64, recall)
}

/// Everything recorded for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    /// Overall ATT squared error per method (missing when the method failed).
    pub att_sq_error: BTreeMap<String, f64>,
    pub cohort_sq_error: BTreeMap<String, Vec<f64>>,
    pub rho_sq_error: BTreeMap<String, f64>,
    pub selection_accuracy: f64,
    pub restriction_recall: Option<f64>,
    /// Per cohort: `Some(covered)` or `None` when the interval is degenerate.
    pub cohort_covered: Vec<Option<bool>>,
    pub overall_conservative_covered: Option<bool>,
    pub overall_split_covered: Option<bool>,
    pub fetwfe_overall: f64,
    pub ciun_holds: bool,
    pub competitor_failures: Vec<String>,
}

fn sq_errors(est: &MethodEstimate, truth: &Truth, cohorts: &[usize]) -> (f64, Vec<f64>, Option<f64>) {
    let overall = (est.overall_att - truth.overall_att).powi(2);
    let per = cohorts
        .iter()
        .map(|r| (est.cohort_att[r] - truth.cohort_att[r]).powi(2))
        .collect();
    (overall, per, None)
}

fn rho_error(rho: &[f64], beta_star: &[f64], layout: &DesignLayout) -> f64 {
    let truth = split_beta(beta_star, layout).expect("beta matches layout").rho;
    rho.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn run_replicate(
    config: &SimConfig,
    theta_star: &[f64],
    beta_star: &[f64],
    index: usize,
) -> Result<ReplicateResult, SimError> {
    let mut rng = replicate_rng(config.seed, index);
    let (data, truth) = gen_panel(config, theta_star, beta_star, &mut rng)?;
    let split = draw_split_counts(&mut rng, config.n_units, &config.cohorts, &config.probabilities())?;

    let dm = build_design(&data)?;
    let y = DVector::from_vec(data.stacked_response());
    let t = config.n_times;
    let (vc, source) = if config.estimate_variance {
        resolve_variance(&dm.values, &y, t, None, None)?
    } else {
        // a zero variance would make Ω singular; a tiny positive value
        // leaves the transform as the identity up to rounding
        let vc = VarianceComponents::new(config.sigma_sq.max(1e-12), config.sigma_c_sq)
            .map_err(EstimateError::from)?;
        (vc, VarianceSource::Supplied)
    };
    let layout = dm.layout.clone();
    let prepared = prepare_with(dm.values, y, dm.layout, vc, source, cohort_counts(&data), FusionChoice::Staggered)?;
    let model: FittedModel = fit_prepared(prepared, &config.solver)?;

    let cohorts = &config.cohorts;
    let fe = estimate_from_beta(&model.fit.beta_hat, &layout, &model.prepared.counts);
    let mut att_sq = BTreeMap::new();
    let mut cohort_sq = BTreeMap::new();
    let mut rho_sq = BTreeMap::new();
    let (o, per, _) = sq_errors(&fe, &truth, cohorts);
    att_sq.insert(Method::Fetwfe.name().to_string(), o);
    cohort_sq.insert(Method::Fetwfe.name().to_string(), per);
    rho_sq.insert(
        Method::Fetwfe.name().to_string(),
        rho_error(fe.rho.as_deref().unwrap_or(&[]), beta_star, &layout),
    );

    let mut failures = Vec::new();
    for m in [Method::Etwfe, Method::Betwfe, Method::TwfeCovs] {
        match competitor_fit(m, &data, &vc, &config.solver, config.competitors_raw) {
            Ok(est) => {
                let (o, per, _) = sq_errors(&est, &truth, cohorts);
                att_sq.insert(m.name().to_string(), o);
                cohort_sq.insert(m.name().to_string(), per);
                if let Some(rho) = &est.rho {
                    rho_sq.insert(m.name().to_string(), rho_error(rho, beta_star, &layout));
                }
            }
            Err(_) => failures.push(m.name().to_string()),
        }
    }

    let (acc, recall) = selection_accuracy(&model.fit.theta_hat, theta_star);
    let cov = model.selected_cov()?;
    let alpha = config.alpha;
    let mut cohort_covered = Vec::new();
    for &r in cohorts {
        let inf = model.infer_fixed(&crate::effects::cohort_weights(&layout, r), cov.as_ref(), alpha)?;
        cohort_covered.push(inf.covers(truth.cohort_att[&r]));
    }
    let cons = model.infer_overall(&model.prepared.counts, OverallMode::Conservative, cov.as_ref(), alpha)?;
    let exact = model.infer_overall(&split, OverallMode::SplitSample, cov.as_ref(), alpha)?;

    Ok(ReplicateResult {
        index,
        att_sq_error: att_sq,
        cohort_sq_error: cohort_sq,
        rho_sq_error: rho_sq,
        selection_accuracy: acc,
        restriction_recall: recall,
        cohort_covered,
        overall_conservative_covered: cons.covers(truth.overall_att),
        overall_split_covered: exact.covers(truth.overall_att),
        fetwfe_overall: fe.overall_att,
        ciun_holds: model.ciun().holds,
        competitor_failures: failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
    pub rate: f64,
    /// Intervals not formed because the variance was degenerate.
    pub degenerate: usize,
}

impl Rate {
    fn of(flags: impl Iterator<Item = Option<bool>>) -> Self {
        let (mut hits, mut total, mut degenerate) = (0, 0, 0);
        for f in flags {
            match f {
                Some(c) => {
                    total += 1;
                    hits += c as usize;
                }
                None => degenerate += 1,
            }
        }
        let rate = if total > 0 { hits as f64 / total as f64 } else { f64::NAN };
        Self {
            hits,
            total,
            rate,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub att_sq_error: Option<MeanSe>,
    pub cohort_sq_error: Vec<Option<MeanSe>>,
    pub rho_sq_error: Option<MeanSe>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub replications: usize,
    pub completed: usize,
    pub skipped: usize,
    pub skip_reasons: Vec<String>,
    pub p: usize,
    pub methods: Vec<MethodMetrics>,
    pub selection_accuracy: Option<MeanSe>,
    pub restriction_recall: Option<MeanSe>,
    pub cohort_coverage: Vec<Rate>,
    pub overall_conservative_coverage: Rate,
    pub overall_split_coverage: Rate,
    /// Fraction of replicates with an exactly zero FETWFE overall ATT.
    pub zero_overall_rate: f64,
    pub ciun_rate: f64,
}

pub fn aggregate(config: &SimConfig, p: usize, results: &[Result<ReplicateResult, String>]) -> StudyMetrics {
    let ok: Vec<&ReplicateResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let skip_reasons: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let r = config.cohorts.len();
    let methods = Method::ALL
        .iter()
        .map(|m| {
            let key = m.name();
            let att: Vec<f64> = ok.iter().filter_map(|x| x.att_sq_error.get(key).copied()).collect();
            let rho: Vec<f64> = ok.iter().filter_map(|x| x.rho_sq_error.get(key).copied()).collect();
            let cohort = (0..r)
                .map(|k| {
                    let v: Vec<f64> = ok
                        .iter()
                        .filter_map(|x| x.cohort_sq_error.get(key).map(|c| c[k]))
                        .collect();
                    MeanSe::of(&v)
                })
                .collect();
            MethodMetrics {
                method: key.to_string(),
                att_sq_error: MeanSe::of(&att),
                cohort_sq_error: cohort,
                rho_sq_error: MeanSe::of(&rho),
                failures: ok.len() - att.len(),
            }
        })
        .collect();
    let acc: Vec<f64> = ok.iter().map(|x| x.selection_accuracy).collect();
    let rec: Vec<f64> = ok.iter().filter_map(|x| x.restriction_recall).collect();
    let n = ok.len().max(1) as f64;
    StudyMetrics {
        replications: config.replications,
        completed: ok.len(),
        skipped: skip_reasons.len(),
        skip_reasons,
        p,
        methods,
        selection_accuracy: MeanSe::of(&acc),
        restriction_recall: MeanSe::of(&rec),
        cohort_coverage: (0..r).map(|k| Rate::of(ok.iter().map(|x| x.cohort_covered[k]))).collect(),
        overall_conservative_coverage: Rate::of(ok.iter().map(|x| x.overall_conservative_covered)),
        overall_split_coverage: Rate::of(ok.iter().map(|x| x.overall_split_covered)),
        zero_overall_rate: ok.iter().filter(|x| x.fetwfe_overall == 0.0).count() as f64 / n,
        ciun_rate: ok.iter().filter(|x| x.ciun_holds).count() as f64 / n,
    }
}

/// Runs every replicate (in parallel) and aggregates in index order.
pub fn run_study(config: &SimConfig) -> Result<(StudyMetrics, Vec<ReplicateResult>), SimError> {
    config.validate()?;
    let layout = config.layout()?;
    let (theta, beta) = gen_coefficients(&layout, config, config.seed);
    let results: Vec<Result<ReplicateResult, String>> = (0..config.replications)
        .into_par_iter()
        .map(|i| run_replicate(config, &theta, &beta, i).map_err(|e| format!("replicate {i}: {e}")))
        .collect();
    let metrics = aggregate(config, layout.p(), &results);
    let ok = results.into_iter().filter_map(Result::ok).collect();
    Ok((metrics, ok))
}

/// Flat `metric,method,index,value,se` rows.
pub fn write_metrics_csv<W: Write>(m: &StudyMetrics, out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "method", "index", "value", "se", "n"])?;
    let mut row = |metric: &str, method: &str, idx: String, v: f64, se: String, n: usize| {
        w.write_record([metric, method, &idx, &v.to_string(), &se, &n.to_string()])
    };
    for mm in &m.methods {
        if let Some(s) = mm.att_sq_error {
            row("att_sq_error", &mm.method, String::new(), s.mean, s.se.to_string(), s.n)?;
        }
        for (k, c) in mm.cohort_sq_error.iter().enumerate() {
            if let Some(s) = c {
                row("cohort_sq_error", &mm.method, k.to_string(), s.mean, s.se.to_string(), s.n)?;
            }
        }
        if let Some(s) = mm.rho_sq_error {
            row("rho_sq_error", &mm.method, String::new(), s.mean, s.se.to_string(), s.n)?;
        }
    }
    for (name, s) in [("selection_accuracy", m.selection_accuracy), ("restriction_recall", m.restriction_recall)] {
        if let Some(s) = s {
            row(name, "FETWFE", String::new(), s.mean, s.se.to_string(), s.n)?;
        }
    }
    for (k, c) in m.cohort_coverage.iter().enumerate() {
        row("cohort_coverage", "FETWFE", k.to_string(), c.rate, String::new(), c.total)?;
    }
    row(
        "overall_conservative_coverage",
        "FETWFE",
        String::new(),
        m.overall_conservative_coverage.rate,
        String::new(),
        m.overall_conservative_coverage.total,
    )?;
    row(
        "overall_split_coverage",
        "FETWFE",
        String::new(),
        m.overall_split_coverage.rate,
        String::new(),
        m.overall_split_coverage.total,
    )?;
    row("zero_overall_rate", "FETWFE", String::new(), m.zero_overall_rate, String::new(), m.completed)?;
    row("ciun_rate", "FETWFE", String::new(), m.ciun_rate, String::new(), m.completed)?;
    w.flush()?;
    Ok(())
}

struct PolicyFrame {
    labels: Vec<i64>,
    years: Vec<i64>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn policy_frame(seed: u64) -> PolicyFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let years: Vec<i64> = (1964..=1996).collect();
    let t = years.len();
    let cohort_years = [1969, 1970, 1971, 1972, 1973, 1974, 1975, 1976, 1977, 1980, 1984, 1985];
    let sizes = [3, 4, 3, 4, 3, 3, 3, 3, 3, 3, 3, 2];
    let mut labels: Vec<i64> = vec![1964; 9];
    labels.extend(std::iter::repeat_n(0, 5));
    for (y, k) in cohort_years.iter().zip(sizes) {
        labels.extend(std::iter::repeat_n(*y, k));
    }
    let n = labels.len();
    let mut z = || rng.sample::<f64, _>(StandardNormal);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        x[(i, 0)] = 9.4 + 0.18 * z();
        x[(i, 1)] = 0.05 + 0.015 * z();
        let unit = 1.1 * z();
        let cov = 0.8 * (x[(i, 0)] - 9.4) + 6.0 * (x[(i, 1)] - 0.05);
        for s in 0..t {
            let effect = if labels[i] != 0 && years[s] >= labels[i] {
                -0.25 - 0.01 * (years[s] - labels[i]) as f64
            } else {
                0.0
            };
            y[(i, s)] = 5.5 + unit - 0.04 * s as f64 + cov + effect + 0.45 * z();
        }
    }
    PolicyFrame { labels, years, x, y }
}

/// A deterministic synthetic panel shaped like a state-by-year policy study
/// after removing units treated in the first year: 42 units over 1964-1996,
/// 5 never treated, 12 adoption cohorts and two time-invariant controls.
pub fn policy_style_panel(seed: u64) -> PanelDataset {
    let f = policy_frame(seed);
    let first = f.years[0];
    let keep: Vec<usize> = (0..f.labels.len())
        .filter(|&i| f.labels[i] == 0 || f.labels[i] > first)
        .collect();
    let assignment = keep
        .iter()
        .map(|&i| if f.labels[i] == 0 { 0 } else { (f.labels[i] - first + 1) as usize })
        .collect();
    let xs = DMatrix::from_fn(keep.len(), 2, |k, j| f.x[(keep[k], j)]);
    let ys = DMatrix::from_fn(keep.len(), f.years.len(), |k, s| f.y[(keep[k], s)]);
    let ids = keep.iter().map(|i| format!("s{:02}", i + 1)).collect();
    PanelDataset::with_labels(
        assignment,
        xs,
        ys,
        ids,
        f.years.clone(),
        vec!["lnpersinc".into(), "afdcrolls".into()],
    )
    .expect("synthetic panel is valid")
}

/// Writes the full 51-unit version (including the 9 units treated in the
/// first year) in the long CSV format.
pub fn write_policy_style_csv<W: Write>(seed: u64, out: W) -> Result<(), SimError> {
    let f = policy_frame(seed);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "time", "response", "cohort", "lnpersinc", "afdcrolls"])?;
    for i in 0..f.labels.len() {
        for (s, year) in f.years.iter().enumerate() {
            w.write_record([
                format!("s{:02}", i + 1),
                year.to_string(),
                f.y[(i, s)].to_string(),
                f.labels[i].to_string(),
                f.x[(i, 0)].to_string(),
                f.x[(i, 1)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
