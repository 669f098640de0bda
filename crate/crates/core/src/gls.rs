//! Random-effects error covariance `Ω = σ²I + σ_c²11ᵀ` and the GLS whitening
//! transform applied block-by-block to each unit's `T` rows.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GlsError {
    #[error("variance components must be finite with sigma_sq > 0 and sigma_c_sq >= 0 (got {sigma_sq}, {sigma_c_sq})")]
    InvalidVariance { sigma_sq: f64, sigma_c_sq: f64 },
    #[error("{rows} rows is not a multiple of {n_times} periods")]
    NotBlocked { rows: usize, n_times: usize },
    #[error("design has {design} rows but response has {response}")]
    DimensionMismatch { design: usize, response: usize },
    #[error("residuals have zero within-unit variation")]
    DegenerateResiduals,
    #[error("ridge system for variance estimation could not be factored")]
    RidgeFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VarianceComponents {
    pub sigma_sq: f64,
    pub sigma_c_sq: f64,
}

impl VarianceComponents {
    pub fn new(sigma_sq: f64, sigma_c_sq: f64) -> Result<Self, GlsError> {
        if !(sigma_sq.is_finite() && sigma_c_sq.is_finite() && sigma_sq > 0.0 && sigma_c_sq >= 0.0) {
            return Err(GlsError::InvalidVariance {
                sigma_sq,
                sigma_c_sq,
            });
        }
        Ok(Self {
            sigma_sq,
            sigma_c_sq,
        })
    }

    /// Weight kept by the unit mean under `σΩ^{-1/2}`.
    pub fn shrink_factor(&self, n_times: usize) -> f64 {
        (self.sigma_sq / (self.sigma_sq + n_times as f64 * self.sigma_c_sq)).sqrt()
    }

    /// `T x T` covariance of one unit's errors.
    pub fn omega(&self, n_times: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n_times, n_times, |i, j| {
            self.sigma_c_sq + if i == j { self.sigma_sq } else { 0.0 }
        })
    }

    /// `Ω⁻¹` by Sherman-Morrison.
    pub fn omega_inv(&self, n_times: usize) -> DMatrix<f64> {
        let c = self.sigma_c_sq / (self.sigma_sq + n_times as f64 * self.sigma_c_sq);
        DMatrix::from_fn(n_times, n_times, |i, j| {
            ((if i == j { 1.0 } else { 0.0 }) - c) / self.sigma_sq
        })
    }

    /// `σΩ^{-1/2} = (I - J/T) + a J/T`.
    pub fn scaled_inv_sqrt(&self, n_times: usize) -> DMatrix<f64> {
        let a = self.shrink_factor(n_times);
        let tt = n_times as f64;
        DMatrix::from_fn(n_times, n_times, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - (1.0 - a) / tt
        })
    }
}

fn transform_block(x: &mut [f64], one_minus_a: f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let shift = one_minus_a * mean;
    for v in x {
        *v -= shift;
    }
}

/// Applies `σΩ^{-1/2}` to each consecutive block of `n_times` entries.
pub fn gls_transform_vec(
    y: &DVector<f64>,
    n_times: usize,
    vc: &VarianceComponents,
) -> Result<DVector<f64>, GlsError> {
    if n_times == 0 || !y.len().is_multiple_of(n_times) {
        return Err(GlsError::NotBlocked {
            rows: y.len(),
            n_times,
        });
    }
    let mut out = y.clone();
    if vc.sigma_c_sq == 0.0 {
        return Ok(out);
    }
    let oma = 1.0 - vc.shrink_factor(n_times);
    for block in out.as_mut_slice().chunks_mut(n_times) {
        transform_block(block, oma);
    }
    Ok(out)
}

/// Applies `σΩ^{-1/2}` to each unit's row block of every column.
pub fn gls_transform_matrix(
    z: &DMatrix<f64>,
    n_times: usize,
    vc: &VarianceComponents,
) -> Result<DMatrix<f64>, GlsError> {
    if n_times == 0 || !z.nrows().is_multiple_of(n_times) {
        return Err(GlsError::NotBlocked {
            rows: z.nrows(),
            n_times,
        });
    }
    let mut out = z.clone();
    if vc.sigma_c_sq == 0.0 {
        return Ok(out);
    }
    let oma = 1.0 - vc.shrink_factor(n_times);
    for mut col in out.column_iter_mut() {
        for block in col.as_mut_slice().chunks_mut(n_times) {
            transform_block(block, oma);
        }
    }
    Ok(out)
}

/// Moment estimates from residuals stacked unit-major:
/// `σ̂² = ΣΣ(e_it - ē_i)² / (N(T-1))`, `σ̂_c² = max(0, Σē_i²/N - σ̂²/T)`.
pub fn variance_components_from_residuals(
    resid: &[f64],
    n_times: usize,
) -> Result<VarianceComponents, GlsError> {
    if n_times < 2 || !resid.len().is_multiple_of(n_times) || resid.is_empty() {
        return Err(GlsError::NotBlocked {
            rows: resid.len(),
            n_times,
        });
    }
    let n = resid.len() / n_times;
    let tt = n_times as f64;
    let mut within = 0.0;
    let mut between = 0.0;
    for block in resid.chunks(n_times) {
        let m = block.iter().sum::<f64>() / tt;
        within += block.iter().map(|e| (e - m) * (e - m)).sum::<f64>();
        between += m * m;
    }
    let sigma_sq = within / (n as f64 * (tt - 1.0));
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(GlsError::DegenerateResiduals);
    }
    let sigma_c_sq = (between / n as f64 - sigma_sq / tt).max(0.0);
    VarianceComponents::new(sigma_sq, sigma_c_sq)
}

/// Estimates the variance components from the residuals of a lightly
/// penalized ridge fit with an unpenalized intercept.
pub fn estimate_variance_components(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    n_times: usize,
) -> Result<VarianceComponents, GlsError> {
    if z.nrows() != y.len() {
        return Err(GlsError::DimensionMismatch {
            design: z.nrows(),
            response: y.len(),
        });
    }
    let n = z.nrows();
    let p = z.ncols();
    let y_mean = y.mean();
    let yc = y.add_scalar(-y_mean);
    let mut zc = z.clone();
    for mut col in zc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let resid = if p == 0 || n == 0 {
        yc
    } else {
        let mut gram = zc.tr_mul(&zc);
        let trace = gram.trace();
        if trace > 0.0 {
            let mu = 1e-3 * trace / p as f64;
            for j in 0..p {
                gram[(j, j)] += mu;
            }
            let chol = gram.cholesky().ok_or(GlsError::RidgeFailed)?;
            let beta = chol.solve(&zc.tr_mul(&yc));
            &yc - &zc * beta
        } else {
            yc
        }
    };
    variance_components_from_residuals(resid.as_slice(), n_times)
}
