//! Balanced staggered-adoption panels.
//!
//! A [`PanelDataset`] holds `N` units observed at `T` consecutive periods,
//! each unit carrying a first-treatment time (or 0 for never treated) and a
//! vector of time-invariant covariates. Times are normalized to `1..=T`
//! internally; the source labels (calendar years, say) are kept for
//! reporting and serialization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::design::count_params;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: empty value in column `{column}`")]
    EmptyCell { row: usize, column: String },
    #[error("unbalanced panel: unit `{unit}` has no observation at time {time}")]
    MissingCell { unit: String, time: i64 },
    #[error("row {row}: duplicate observation for unit `{unit}` at time {time}")]
    DuplicateObservation { row: usize, unit: String, time: i64 },
    #[error("time labels are not a contiguous integer range")]
    NonContiguousTimes,
    #[error("need at least two time periods, found {0}")]
    TooFewPeriods(usize),
    #[error("unit `{unit}` is treated at the first period (use --drop-always-treated to remove such units)")]
    CohortAtTimeOne { unit: String },
    #[error("unit `{unit}` has first-treatment time {cohort} outside the observed periods")]
    CohortOutOfRange { unit: String, cohort: i64 },
    #[error("no never-treated units")]
    NoNeverTreated,
    #[error("row {row}: unit `{unit}` has a first-treatment time that differs from its earlier rows")]
    InconsistentTreatmentTime { row: usize, unit: String },
    #[error("covariate `{name}` has zero variance")]
    ZeroVarianceCovariate { name: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A validated balanced panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    cohorts: Vec<usize>,
    assignment: Vec<usize>,
    covariates: DMatrix<f64>,
    response: DMatrix<f64>,
    unit_ids: Vec<String>,
    time_labels: Vec<i64>,
    covariate_names: Vec<String>,
}

impl PanelDataset {
    /// Builds a panel from normalized data. `assignment[i]` is 0 or the
    /// first treated period of unit `i` in `2..=T`; `response` is `N x T`
    /// and `covariates` is `N x d`.
    pub fn new(
        assignment: Vec<usize>,
        covariates: DMatrix<f64>,
        response: DMatrix<f64>,
    ) -> Result<Self, PanelError> {
        let n = assignment.len();
        let t = response.ncols();
        let d = covariates.ncols();
        Self::with_labels(
            assignment,
            covariates,
            response,
            (1..=n).map(|i| i.to_string()).collect(),
            (1..=t as i64).collect(),
            (1..=d).map(|j| format!("x{j}")).collect(),
        )
    }

    pub fn with_labels(
        assignment: Vec<usize>,
        covariates: DMatrix<f64>,
        response: DMatrix<f64>,
        unit_ids: Vec<String>,
        time_labels: Vec<i64>,
        covariate_names: Vec<String>,
    ) -> Result<Self, PanelError> {
        let n = assignment.len();
        let t = response.ncols();
        if t < 2 {
            return Err(PanelError::TooFewPeriods(t));
        }
        if response.nrows() != n || covariates.nrows() != n || unit_ids.len() != n {
            return Err(PanelError::DimensionMismatch(format!(
                "{} assignments, {} response rows, {} covariate rows, {} unit ids",
                n,
                response.nrows(),
                covariates.nrows(),
                unit_ids.len()
            )));
        }
        if time_labels.len() != t || covariate_names.len() != covariates.ncols() {
            return Err(PanelError::DimensionMismatch(
                "label vectors do not match matrix dimensions".into(),
            ));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::NonFinite("response".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::NonFinite("covariates".into()));
        }
        for (i, &w) in assignment.iter().enumerate() {
            if w == 1 {
                return Err(PanelError::CohortAtTimeOne {
                    unit: unit_ids[i].clone(),
                });
            }
            if w > t {
                return Err(PanelError::CohortOutOfRange {
                    unit: unit_ids[i].clone(),
                    cohort: w as i64,
                });
            }
        }
        if !assignment.contains(&0) {
            return Err(PanelError::NoNeverTreated);
        }
        for (j, col) in covariates.column_iter().enumerate() {
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(PanelError::ZeroVarianceCovariate {
                    name: covariate_names[j].clone(),
                });
            }
        }
        let cohorts: Vec<usize> = assignment
            .iter()
            .copied()
            .filter(|&w| w != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            cohorts,
            assignment,
            covariates,
            response,
            unit_ids,
            time_labels,
            covariate_names,
        })
    }

    pub fn n_units(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_times(&self) -> usize {
        self.response.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Sorted normalized cohort start times.
    pub fn cohorts(&self) -> &[usize] {
        &self.cohorts
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Source label of normalized period `t` (1-based).
    pub fn time_label(&self, t: usize) -> i64 {
        self.time_labels[t - 1]
    }

    /// Response stacked unit-major: `T` consecutive entries per unit.
    pub fn stacked_response(&self) -> Vec<f64> {
        let (n, t) = self.response.shape();
        let mut out = Vec::with_capacity(n * t);
        for i in 0..n {
            for s in 0..t {
                out.push(self.response[(i, s)]);
            }
        }
        out
    }

    /// Returns a copy with a new response matrix, keeping all labels.
    pub fn with_response(&self, response: DMatrix<f64>) -> Result<Self, PanelError> {
        if response.shape() != self.response.shape() {
            return Err(PanelError::DimensionMismatch(
                "replacement response has a different shape".into(),
            ));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::NonFinite("response".into()));
        }
        Ok(Self {
            response,
            ..self.clone()
        })
    }
}

/// Options for [`load_panel_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Remove units first treated at (or before) the first observed period
    /// instead of rejecting the file.
    pub drop_always_treated: bool,
}

/// Reads a long-format CSV (`unit,time,response,cohort,x1,...,xd`).
pub fn load_panel<R: Read>(reader: R) -> Result<PanelDataset, PanelError> {
    load_panel_with(reader, LoadOptions::default()).map(|(p, _)| p)
}

/// Like [`load_panel`], also returning the ids of units dropped by
/// `drop_always_treated`.
pub fn load_panel_with<R: Read>(
    reader: R,
    options: LoadOptions,
) -> Result<(PanelDataset, Vec<String>), PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let unit_col = position("unit")?;
    let time_col = position("time")?;
    let resp_col = position("response")?;
    let cohort_col = position("cohort")?;
    let fixed = [unit_col, time_col, resp_col, cohort_col];
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|c| !fixed.contains(c)).collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

    struct UnitRows {
        cohort: i64,
        covariates: Option<(i64, Vec<f64>)>,
        obs: BTreeMap<i64, f64>,
    }

    let mut order: Vec<String> = Vec::new();
    let mut units: HashMap<String, UnitRows> = HashMap::new();
    let mut all_times: BTreeSet<i64> = BTreeSet::new();

    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based line number in the file, counting the header.
        let row = k + 2;
        let cell = |c: usize| -> Result<&str, PanelError> {
            let v = record.get(c).unwrap_or("");
            if v.is_empty() {
                Err(PanelError::EmptyCell {
                    row,
                    column: headers[c].to_string(),
                })
            } else {
                Ok(v)
            }
        };
        let parse_int = |c: usize| -> Result<i64, PanelError> {
            let v = cell(c)?;
            v.parse::<i64>()
                .or_else(|_| match v.parse::<f64>() {
                    Ok(f) if f.fract() == 0.0 && f.is_finite() => Ok(f as i64),
                    _ => Err(()),
                })
                .map_err(|_| PanelError::Parse {
                    row,
                    column: headers[c].to_string(),
                    value: v.to_string(),
                })
        };
        let parse_real = |c: usize| -> Result<f64, PanelError> {
            let v = cell(c)?;
            let x = v.parse::<f64>().map_err(|_| PanelError::Parse {
                row,
                column: headers[c].to_string(),
                value: v.to_string(),
            })?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(PanelError::NonFinite(format!("row {row}, column `{}`", &headers[c])))
            }
        };

        let unit = cell(unit_col)?.to_string();
        let time = parse_int(time_col)?;
        let response = parse_real(resp_col)?;
        let cohort = parse_int(cohort_col)?;
        let covs = cov_cols
            .iter()
            .map(|&c| parse_real(c))
            .collect::<Result<Vec<_>, _>>()?;

        let entry = units.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            UnitRows {
                cohort,
                covariates: None,
                obs: BTreeMap::new(),
            }
        });
        if entry.cohort != cohort {
            return Err(PanelError::InconsistentTreatmentTime { row, unit });
        }
        if entry.obs.insert(time, response).is_some() {
            return Err(PanelError::DuplicateObservation { row, unit, time });
        }
        // Covariates are taken from each unit's earliest period.
        match &entry.covariates {
            Some((t0, _)) if *t0 <= time => {}
            _ => entry.covariates = Some((time, covs)),
        }
        all_times.insert(time);
    }

    let (&first, &last) = match (all_times.first(), all_times.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(PanelError::TooFewPeriods(0)),
    };
    let n_times = all_times.len();
    if (last - first + 1) as usize != n_times {
        return Err(PanelError::NonContiguousTimes);
    }
    if n_times < 2 {
        return Err(PanelError::TooFewPeriods(n_times));
    }
    let time_labels: Vec<i64> = all_times.into_iter().collect();

    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for id in order {
        let u = &units[&id];
        if u.cohort != 0 && u.cohort <= first {
            if options.drop_always_treated {
                dropped.push(id);
                continue;
            }
            return Err(PanelError::CohortAtTimeOne { unit: id });
        }
        if u.cohort > last {
            return Err(PanelError::CohortOutOfRange {
                unit: id,
                cohort: u.cohort,
            });
        }
        kept.push(id);
    }

    let n = kept.len();
    let d = cov_cols.len();
    let mut response = DMatrix::zeros(n, n_times);
    let mut covariates = DMatrix::zeros(n, d);
    let mut assignment = Vec::with_capacity(n);
    for (i, id) in kept.iter().enumerate() {
        let u = &units[id];
        for (s, label) in time_labels.iter().enumerate() {
            match u.obs.get(label) {
                Some(&v) => response[(i, s)] = v,
                None => {
                    return Err(PanelError::MissingCell {
                        unit: id.clone(),
                        time: *label,
                    })
                }
            }
        }
        if let Some((_, covs)) = &u.covariates {
            for (j, &v) in covs.iter().enumerate() {
                covariates[(i, j)] = v;
            }
        }
        assignment.push(if u.cohort == 0 {
            0
        } else {
            (u.cohort - first + 1) as usize
        });
    }

    let dataset = PanelDataset::with_labels(
        assignment,
        covariates,
        response,
        kept,
        time_labels,
        covariate_names,
    )?;
    Ok((dataset, dropped))
}

/// Writes the panel back out in the long format read by [`load_panel`].
pub fn write_panel<W: Write>(data: &PanelDataset, writer: W) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "unit".to_string(),
        "time".to_string(),
        "response".to_string(),
        "cohort".to_string(),
    ];
    header.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..data.n_units() {
        let w = data.assignment[i];
        let cohort = if w == 0 { 0 } else { data.time_label(w) };
        for s in 0..data.n_times() {
            let mut rec = vec![
                data.unit_ids[i].clone(),
                data.time_labels[s].to_string(),
                data.response[(i, s)].to_string(),
                cohort.to_string(),
            ];
            rec.extend(data.covariates.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Cohort sizes: never treated, each cohort, and the treated total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CohortCounts {
    pub never_treated: usize,
    /// `(start time, count)` in cohort order.
    pub per_cohort: Vec<(usize, usize)>,
    pub treated: usize,
}

impl CohortCounts {
    pub fn new(never_treated: usize, per_cohort: Vec<(usize, usize)>) -> Self {
        let treated = per_cohort.iter().map(|&(_, c)| c).sum();
        Self {
            never_treated,
            per_cohort,
            treated,
        }
    }

    /// Tallies `assignment` against the cohort list. Labels outside
    /// `cohorts` (other than 0) are ignored.
    pub fn from_assignment(cohorts: &[usize], assignment: &[usize]) -> Self {
        let never = assignment.iter().filter(|&&w| w == 0).count();
        let per = cohorts
            .iter()
            .map(|&r| (r, assignment.iter().filter(|&&w| w == r).count()))
            .collect();
        Self::new(never, per)
    }

    pub fn total(&self) -> usize {
        self.never_treated + self.treated
    }

    pub fn count(&self, cohort: usize) -> Option<usize> {
        self.per_cohort
            .iter()
            .find(|&&(r, _)| r == cohort)
            .map(|&(_, c)| c)
    }

    /// `N_r / N_tau` for each cohort.
    pub fn treated_shares(&self) -> Option<Vec<f64>> {
        if self.treated == 0 {
            return None;
        }
        let tau = self.treated as f64;
        Some(self.per_cohort.iter().map(|&(_, c)| c as f64 / tau).collect())
    }

    /// Empirical assignment probabilities over `{0} ∪ cohorts`.
    pub fn proportions(&self) -> Vec<f64> {
        let n = self.total() as f64;
        std::iter::once(self.never_treated)
            .chain(self.per_cohort.iter().map(|&(_, c)| c))
            .map(|c| c as f64 / n)
            .collect()
    }
}

pub fn cohort_counts(data: &PanelDataset) -> CohortCounts {
    CohortCounts::from_assignment(&data.cohorts, &data.assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    HardFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueKind {
    /// A treated cohort with fewer than `d + 1` units.
    SmallCohort { cohort: i64, count: usize },
    SmallNeverTreated { count: usize },
    TooManyParameters { p: usize, nt: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_units: usize,
    pub n_times: usize,
    pub n_cohorts: usize,
    pub n_covariates: usize,
    pub n_params: usize,
    pub n_obs: usize,
    pub counts: CohortCounts,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn has_hard_failure(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::HardFailure)
    }

    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks the counting conditions behind full column rank of the design.
pub fn validate_rank_preconditions(data: &PanelDataset) -> ValidationReport {
    let d = data.n_covariates();
    let counts = cohort_counts(data);
    let nt = data.n_units() * data.n_times();
    let p = count_params(data.n_times(), data.cohorts(), d)
        .map(|(p, _)| p)
        .unwrap_or(0);
    let mut issues = Vec::new();
    if counts.never_treated < d + 1 {
        issues.push(ValidationIssue {
            severity: Severity::Warning,
            kind: IssueKind::SmallNeverTreated {
                count: counts.never_treated,
            },
            message: format!(
                "never-treated group has {} units, fewer than d+1 = {}",
                counts.never_treated,
                d + 1
            ),
        });
    }
    for &(r, c) in &counts.per_cohort {
        if c < d + 1 {
            let label = data.time_label(r);
            issues.push(ValidationIssue {
                severity: Severity::Warning,
                kind: IssueKind::SmallCohort { cohort: label, count: c },
                message: format!(
                    "cohort {label} has {c} units, fewer than d+1 = {}; the design is not full column rank",
                    d + 1
                ),
            });
        }
    }
    if p > nt {
        issues.push(ValidationIssue {
            severity: Severity::HardFailure,
            kind: IssueKind::TooManyParameters { p, nt },
            message: format!("{p} parameters exceed {nt} observations"),
        });
    }
    ValidationReport {
        n_units: data.n_units(),
        n_times: data.n_times(),
        n_cohorts: data.cohorts().len(),
        n_covariates: d,
        n_params: p,
        n_obs: nt,
        counts,
        issues,
    }
}
