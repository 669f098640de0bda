//! The extended two-way fixed-effects design matrix and its column map.
//!
//! Columns come in seven blocks, in this order:
//!
//! | block          | width      | coefficient |
//! |----------------|------------|-------------|
//! | cohort FE      | `R`        | ν_r         |
//! | time FE        | `T-1`      | γ_t         |
//! | covariates     | `d`        | κ_j         |
//! | cohort × cov   | `d·R`      | ζ_rj        |
//! | time × cov     | `d·(T-1)`  | ξ_tj        |
//! | treatment      | `W`        | τ_rt        |
//! | treatment × cov| `d·W`      | ρ_rtj       |
//!
//! where `W = Σ_r (T - r + 1)`. Interaction blocks are grouped by covariate
//! (all of covariate 1, then all of covariate 2, ...), which makes the
//! fusion matrix block diagonal without any column permutation. Treatment
//! columns are cohort-major, time-minor.
//!
//! Covariate indices `j` are 0-based throughout the API; column names use
//! 1-based `x1..xd`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::panel::PanelDataset;

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error("need at least two periods, got {0}")]
    TooFewPeriods(usize),
    #[error("cohort start time {cohort} is outside 2..={n_times}")]
    CohortOutOfRange { cohort: usize, n_times: usize },
    #[error("cohort start times must be strictly increasing")]
    UnsortedCohorts,
    #[error("no treated cohorts")]
    NoTreatedCohorts,
    #[error("cohort {0} has no units, so its covariate mean is undefined")]
    EmptyCohort(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Returns `(p, W)`: the column count and the number of treatment effects.
pub fn count_params(
    n_times: usize,
    cohorts: &[usize],
    d: usize,
) -> Result<(usize, usize), DesignError> {
    if n_times < 2 {
        return Err(DesignError::TooFewPeriods(n_times));
    }
    for (k, &r) in cohorts.iter().enumerate() {
        if r < 2 || r > n_times {
            return Err(DesignError::CohortOutOfRange { cohort: r, n_times });
        }
        if k > 0 && cohorts[k - 1] >= r {
            return Err(DesignError::UnsortedCohorts);
        }
    }
    let r_count = cohorts.len();
    let w: usize = cohorts.iter().map(|&r| n_times - r + 1).sum();
    let p = r_count + (n_times - 1) + w + d * (1 + r_count + (n_times - 1) + w);
    Ok((p, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockOffsets {
    pub cohort_fe: usize,
    pub time_fe: usize,
    pub covariates: usize,
    pub cohort_cov: usize,
    pub time_cov: usize,
    pub treatment: usize,
    pub treatment_cov: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    n_times: usize,
    cohorts: Vec<usize>,
    d: usize,
    p: usize,
    w_count: usize,
    offsets: BlockOffsets,
    // Position of τ_{r_k, r_k} inside the treatment block.
    tau_starts: Vec<usize>,
    cohort_means: DMatrix<f64>,
}

impl DesignLayout {
    /// Layout with all cohort means set to zero.
    pub fn new(n_times: usize, cohorts: &[usize], d: usize) -> Result<Self, DesignError> {
        let (p, w_count) = count_params(n_times, cohorts, d)?;
        let r = cohorts.len();
        let tm1 = n_times - 1;
        let cohort_fe = 0;
        let time_fe = cohort_fe + r;
        let covariates = time_fe + tm1;
        let cohort_cov = covariates + d;
        let time_cov = cohort_cov + d * r;
        let treatment = time_cov + d * tm1;
        let treatment_cov = treatment + w_count;
        debug_assert_eq!(treatment_cov + d * w_count, p);
        let mut tau_starts = Vec::with_capacity(r);
        let mut acc = 0;
        for &c in cohorts {
            tau_starts.push(acc);
            acc += n_times - c + 1;
        }
        Ok(Self {
            n_times,
            cohorts: cohorts.to_vec(),
            d,
            p,
            w_count,
            offsets: BlockOffsets {
                cohort_fe,
                time_fe,
                covariates,
                cohort_cov,
                time_cov,
                treatment,
                treatment_cov,
            },
            tau_starts,
            cohort_means: DMatrix::zeros(r, d),
        })
    }

    /// Sets the per-cohort covariate means used to center treatment
    /// interactions. `means` is `R x d`.
    pub fn with_cohort_means(mut self, means: DMatrix<f64>) -> Result<Self, DesignError> {
        if means.shape() != (self.cohorts.len(), self.d) {
            return Err(DesignError::DimensionMismatch(format!(
                "cohort means are {:?}, expected ({}, {})",
                means.shape(),
                self.cohorts.len(),
                self.d
            )));
        }
        self.cohort_means = means;
        Ok(self)
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }
    pub fn cohorts(&self) -> &[usize] {
        &self.cohorts
    }
    pub fn n_cohorts(&self) -> usize {
        self.cohorts.len()
    }
    pub fn n_covariates(&self) -> usize {
        self.d
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn w_count(&self) -> usize {
        self.w_count
    }
    pub fn offsets(&self) -> BlockOffsets {
        self.offsets
    }
    pub fn cohort_means(&self) -> &DMatrix<f64> {
        &self.cohort_means
    }

    pub fn cohort_position(&self, r: usize) -> Option<usize> {
        self.cohorts.iter().position(|&c| c == r)
    }

    /// Position of τ_rt within the treatment block.
    pub fn tau_position(&self, r: usize, t: usize) -> Option<usize> {
        let k = self.cohort_position(r)?;
        if t < r || t > self.n_times {
            return None;
        }
        Some(self.tau_starts[k] + (t - r))
    }

    pub fn nu_index(&self, r: usize) -> Option<usize> {
        self.cohort_position(r).map(|k| self.offsets.cohort_fe + k)
    }

    pub fn gamma_index(&self, t: usize) -> Option<usize> {
        (2..=self.n_times)
            .contains(&t)
            .then(|| self.offsets.time_fe + t - 2)
    }

    pub fn kappa_index(&self, j: usize) -> Option<usize> {
        (j < self.d).then(|| self.offsets.covariates + j)
    }

    pub fn zeta_index(&self, r: usize, j: usize) -> Option<usize> {
        let k = self.cohort_position(r)?;
        (j < self.d).then(|| self.offsets.cohort_cov + j * self.cohorts.len() + k)
    }

    pub fn xi_index(&self, t: usize, j: usize) -> Option<usize> {
        if j >= self.d || !(2..=self.n_times).contains(&t) {
            return None;
        }
        Some(self.offsets.time_cov + j * (self.n_times - 1) + t - 2)
    }

    pub fn tau_index(&self, r: usize, t: usize) -> Option<usize> {
        self.tau_position(r, t).map(|w| self.offsets.treatment + w)
    }

    pub fn rho_index(&self, r: usize, t: usize, j: usize) -> Option<usize> {
        if j >= self.d {
            return None;
        }
        self.tau_position(r, t)
            .map(|w| self.offsets.treatment_cov + j * self.w_count + w)
    }

    /// All `(r, t)` treatment cells, cohort-major then time.
    pub fn tau_cells(&self) -> Vec<(usize, usize)> {
        self.cohorts
            .iter()
            .flat_map(|&r| (r..=self.n_times).map(move |t| (r, t)))
            .collect()
    }

    /// Human-readable column names, e.g. `tau_r2_t3`, `rho_r2_t3_x1`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.p);
        for &r in &self.cohorts {
            names.push(format!("nu_r{r}"));
        }
        for t in 2..=self.n_times {
            names.push(format!("gamma_t{t}"));
        }
        for j in 1..=self.d {
            names.push(format!("kappa_x{j}"));
        }
        for j in 1..=self.d {
            for &r in &self.cohorts {
                names.push(format!("zeta_r{r}_x{j}"));
            }
        }
        for j in 1..=self.d {
            for t in 2..=self.n_times {
                names.push(format!("xi_t{t}_x{j}"));
            }
        }
        let cells = self.tau_cells();
        for &(r, t) in &cells {
            names.push(format!("tau_r{r}_t{t}"));
        }
        for j in 1..=self.d {
            for &(r, t) in &cells {
                names.push(format!("rho_r{r}_t{t}_x{j}"));
            }
        }
        names
    }
}

/// Dense `NT x p` design, rows unit-major with `T` consecutive rows per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub layout: DesignLayout,
}

/// Per-cohort covariate means `X̄_r` (`R x d`).
pub fn cohort_covariate_means(data: &PanelDataset) -> Result<DMatrix<f64>, DesignError> {
    let cohorts = data.cohorts();
    let d = data.n_covariates();
    let x = data.covariates();
    let mut means = DMatrix::zeros(cohorts.len(), d);
    for (k, &r) in cohorts.iter().enumerate() {
        let members: Vec<usize> = (0..data.n_units())
            .filter(|&i| data.assignment()[i] == r)
            .collect();
        if members.is_empty() {
            return Err(DesignError::EmptyCohort(r));
        }
        for j in 0..d {
            let s: f64 = members.iter().map(|&i| x[(i, j)]).sum();
            means[(k, j)] = s / members.len() as f64;
        }
    }
    Ok(means)
}

/// Builds the design, centering treatment interactions at the sample
/// cohort means.
pub fn build_design(data: &PanelDataset) -> Result<DesignMatrix, DesignError> {
    let means = cohort_covariate_means(data)?;
    build_design_with_means(data, means)
}

/// Builds the design with externally supplied cohort means (split-sample
/// mode).
pub fn build_design_with_means(
    data: &PanelDataset,
    cohort_means: DMatrix<f64>,
) -> Result<DesignMatrix, DesignError> {
    if data.cohorts().is_empty() {
        return Err(DesignError::NoTreatedCohorts);
    }
    let t_count = data.n_times();
    let d = data.n_covariates();
    let layout = DesignLayout::new(t_count, data.cohorts(), d)?.with_cohort_means(cohort_means)?;
    let n = data.n_units();
    let x = data.covariates();
    let mut z = DMatrix::zeros(n * t_count, layout.p());

    for i in 0..n {
        let w = data.assignment()[i];
        let k = layout.cohort_position(w);
        for t in 1..=t_count {
            let row = i * t_count + (t - 1);
            if let Some(c) = layout.nu_index(w) {
                z[(row, c)] = 1.0;
            }
            if let Some(c) = layout.gamma_index(t) {
                z[(row, c)] = 1.0;
            }
            for j in 0..d {
                let xij = x[(i, j)];
                z[(row, layout.kappa_index(j).unwrap())] = xij;
                if let Some(c) = layout.zeta_index(w, j) {
                    z[(row, c)] = xij;
                }
                if let Some(c) = layout.xi_index(t, j) {
                    z[(row, c)] = xij;
                }
            }
            if let (Some(k), Some(c)) = (k, layout.tau_index(w, t)) {
                z[(row, c)] = 1.0;
                for j in 0..d {
                    let centered = x[(i, j)] - layout.cohort_means()[(k, j)];
                    z[(row, layout.rho_index(w, t, j).unwrap())] = centered;
                }
            }
        }
    }
    Ok(DesignMatrix { values: z, layout })
}

/// Column-centered design and response, with the means removed.
#[derive(Debug, Clone)]
pub struct Centered {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub column_means: DVector<f64>,
    pub response_mean: f64,
}

pub fn center_response_and_columns(design: &DMatrix<f64>, response: &DVector<f64>) -> Centered {
    let n = design.nrows() as f64;
    let mut z = design.clone();
    let mut means = DVector::zeros(z.ncols());
    for (j, mut col) in z.column_iter_mut().enumerate() {
        let m = col.sum() / n;
        means[j] = m;
        col.add_scalar_mut(-m);
    }
    let y_mean = response.sum() / n;
    let y = response.add_scalar(-y_mean);
    Centered {
        design: z,
        response: y,
        column_means: means,
        response_mean: y_mean,
    }
}

/// Writes the design as CSV with layout-derived headers.
pub fn write_design_csv<W: Write>(design: &DesignMatrix, mut out: W) -> Result<(), DesignError> {
    let io = |e: std::io::Error| DesignError::Io(e.to_string());
    writeln!(out, "{}", design.layout.column_names().join(",")).map_err(io)?;
    for row in design.values.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_configurations() {
        assert_eq!(count_params(30, &[2, 3, 4, 5, 6], 12), Ok((2209, 135)));
        assert_eq!(count_params(5, &[2, 3, 4], 2), Ok((50, 9)));
        assert_eq!(count_params(2, &[2], 0), Ok((3, 1)));
    }

    #[test]
    fn bad_cohorts() {
        assert!(matches!(
            count_params(5, &[1, 3], 0),
            Err(DesignError::CohortOutOfRange { cohort: 1, .. })
        ));
        assert!(matches!(
            count_params(5, &[2, 6], 0),
            Err(DesignError::CohortOutOfRange { cohort: 6, .. })
        ));
        assert_eq!(count_params(5, &[3, 2], 0), Err(DesignError::UnsortedCohorts));
    }

    #[test]
    fn indices_partition_columns() {
        let l = DesignLayout::new(6, &[2, 4, 5], 2).unwrap();
        let mut seen = vec![0usize; l.p()];
        for &r in l.cohorts() {
            seen[l.nu_index(r).unwrap()] += 1;
        }
        for t in 2..=6 {
            seen[l.gamma_index(t).unwrap()] += 1;
        }
        for j in 0..2 {
            seen[l.kappa_index(j).unwrap()] += 1;
            for &r in l.cohorts() {
                seen[l.zeta_index(r, j).unwrap()] += 1;
            }
            for t in 2..=6 {
                seen[l.xi_index(t, j).unwrap()] += 1;
            }
        }
        for (r, t) in l.tau_cells() {
            seen[l.tau_index(r, t).unwrap()] += 1;
            for j in 0..2 {
                seen[l.rho_index(r, t, j).unwrap()] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(l.column_names().len(), l.p());
        assert_eq!(l.tau_index(4, 3), None);
        assert_eq!(l.tau_index(3, 3), None);
    }

    #[test]
    fn two_by_two_hand_enumeration() {
        let data = PanelDataset::new(
            vec![0, 2],
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let z = build_design(&data).unwrap().values;
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 3, &[
            0.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            1.0, 0.0, 0.0,
            1.0, 1.0, 1.0,
        ]);
        assert_eq!(z, expected);
    }

    #[test]
    fn treatment_covariate_centering() {
        // cohort 2 = units 1 and 2 with x = 3 and 1, so the cohort mean is 2
        let data = PanelDataset::new(
            vec![0, 2, 2],
            DMatrix::from_column_slice(3, 1, &[0.0, 3.0, 1.0]),
            DMatrix::zeros(3, 2),
        )
        .unwrap();
        let dm = build_design(&data).unwrap();
        let c = dm.layout.rho_index(2, 2, 0).unwrap();
        // unit 1, time 2
        assert_eq!(dm.values[(3, c)], 1.0);
        assert_eq!(dm.values[(5, c)], -1.0);
        assert_eq!(dm.values[(2, c)], 0.0);
    }

    #[test]
    fn constant_column_centers_to_zero() {
        let z = DMatrix::from_element(5, 2, 3.5);
        let y = DVector::from_element(5, 2.0);
        let c = center_response_and_columns(&z, &y);
        assert!(c.design.iter().all(|&v| v == 0.0));
        assert_eq!(c.column_means[0], 3.5);
        assert_eq!(c.response_mean, 2.0);
    }

    #[test]
    fn centered_input_is_unchanged() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, -1.0, 2.0, 0.5, 0.25, -0.5, -0.25]);
        let y = DVector::from_row_slice(&[1.0, -1.0, 3.0, -3.0]);
        let c = center_response_and_columns(&z, &y);
        assert!((c.design - z).amax() <= 1e-15);
        assert!((c.response - y).amax() <= 1e-15);
    }

    #[test]
    fn design_csv_header() {
        let data = PanelDataset::new(
            vec![0, 2, 3],
            DMatrix::from_column_slice(3, 1, &[0.0, 3.0, 1.0]),
            DMatrix::zeros(3, 3),
        )
        .unwrap();
        let dm = build_design(&data).unwrap();
        let mut buf = Vec::new();
        write_design_csv(&dm, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.contains("tau_r2_t3"));
        assert!(header.contains("rho_r2_t3_x1"));
        assert_eq!(text.lines().count(), 1 + 9);
    }
}
