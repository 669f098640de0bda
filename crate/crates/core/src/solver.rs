//! Bridge-penalized least squares `‖y - Xθ‖² + λ Σ|θ_j|^q` by cyclic
//! coordinate descent on the Gram matrix, with a log-spaced λ path and BIC
//! selection.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionMatrix, SparseMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("design has {design} rows but response has {response}")]
    DimensionMismatch { design: usize, response: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("penalty level must be finite and nonnegative (got {0})")]
    InvalidLambda(f64),
    #[error("design is rank deficient; the unpenalized fit is not unique")]
    RankDeficientAtZeroLambda,
    #[error("response is orthogonal to every column; the penalty path is empty")]
    ZeroResponse,
    #[error("non-finite value in design or response")]
    NonFinite,
    #[error("warm start has length {got}, expected {expected}")]
    WarmStartLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub q: f64,
    pub lambda_grid_size: usize,
    pub lambda_min_ratio: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub ridge_lambda2: f64,
    pub standardize: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            lambda_grid_size: 100,
            lambda_min_ratio: 1e-4,
            max_iterations: 10_000,
            tolerance: 1e-7,
            ridge_lambda2: 0.0,
            standardize: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.q > 0.0 && self.q <= 2.0) {
            return bad("q must lie in (0, 2]");
        }
        if self.lambda_grid_size == 0 {
            return bad("lambda_grid_size must be positive");
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio <= 1.0) {
            return bad("lambda_min_ratio must lie in (0, 1]");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance must be positive");
        }
        if !(self.ridge_lambda2 >= 0.0 && self.ridge_lambda2.is_finite()) {
            return bad("ridge_lambda2 must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeFit {
    pub lambda: f64,
    pub q: f64,
    pub theta_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub selected: Vec<usize>,
    pub rss: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One point of a fitted λ path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub support_size: usize,
    pub rss: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Global minimizer of `(θ - z)² + lam·|θ|^q`.
pub fn scalar_bridge_threshold(z: f64, lam: f64, q: f64) -> f64 {
    if lam == 0.0 || z == 0.0 {
        return z;
    }
    if q == 2.0 {
        return z / (1.0 + lam);
    }
    let a = z.abs();
    let s = z.signum();
    if q == 1.0 {
        return s * (a - lam / 2.0).max(0.0);
    }
    if q < 1.0 && lam >= zero_level(q) * a.powf(2.0 - q) * (1.0 + 1e-9) {
        return 0.0;
    }
    let dg = |t: f64| 2.0 * (t - a) + lam * q * t.powf(q - 1.0);
    let ddg = |t: f64| 2.0 + lam * q * (q - 1.0) * t.powf(q - 2.0);
    if q > 1.0 {
        // dg is increasing on (0, a) with dg(0+) < 0 < dg(a)
        return s * newton_bisect(dg, ddg, 0.0, a);
    }
    let infl = (lam * q * (1.0 - q) / 2.0).powf(1.0 / (2.0 - q));
    if infl >= a || dg(infl) >= 0.0 {
        return 0.0;
    }
    let root = newton_bisect(dg, ddg, infl, a);
    let g_root = (root - a).powi(2) + lam * root.powf(q);
    if g_root < a * a {
        s * root
    } else {
        0.0
    }
}

/// Closed-form `k` with the threshold zero for `lam > k·|z|^(2-q)`, `q < 1`.
fn zero_level(q: f64) -> f64 {
    let t = 2.0 * (1.0 - q) / (2.0 - q);
    2.0 / (2.0 - q) * t.powf(1.0 - q)
}

/// Root of an increasing function with `f(lo) < 0 < f(hi)`.
fn newton_bisect(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut x = hi;
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = df(x);
        if d > 0.0 && (fx / d).abs() <= 4.0 * f64::EPSILON * x.abs() {
            return x;
        }
        let mut next = x - fx / d;
        if !(d > 0.0) || !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        x = next;
        if hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
    }
    x
}

/// A bridge problem with cached Gram matrix and column scales.
#[derive(Debug, Clone)]
pub struct BridgeProblem<'a> {
    x: Cow<'a, DMatrix<f64>>,
    y: Cow<'a, DVector<f64>>,
    n_data: usize,
    scale: Vec<f64>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    back: Option<&'a SparseMatrix>,
}

impl<'a> BridgeProblem<'a> {
    /// Plain problem on `design` (already reparameterized and centered).
    pub fn new(
        design: &'a DMatrix<f64>,
        response: &'a DVector<f64>,
        config: &SolverConfig,
    ) -> Result<Self, SolverError> {
        Self::build(Cow::Borrowed(design), Cow::Borrowed(response), design.nrows(), None, config)
    }

    /// Problem in θ-coordinates for a fusion matrix, applying ridge
    /// augmentation when `config.ridge_lambda2 > 0`. `design` is `Z D⁻¹`.
    pub fn with_fusion(
        design: &'a DMatrix<f64>,
        response: &'a DVector<f64>,
        fusion: &'a FusionMatrix,
        config: &SolverConfig,
    ) -> Result<Self, SolverError> {
        let n = design.nrows();
        if config.ridge_lambda2 > 0.0 {
            let (xa, ya) = ridge_augment(design, response, fusion, config.ridge_lambda2)?;
            Self::build(Cow::Owned(xa), Cow::Owned(ya), n, Some(fusion.d_inv()), config)
        } else {
            Self::build(Cow::Borrowed(design), Cow::Borrowed(response), n, Some(fusion.d_inv()), config)
        }
    }

    fn build(
        x: Cow<'a, DMatrix<f64>>,
        y: Cow<'a, DVector<f64>>,
        n_data: usize,
        back: Option<&'a SparseMatrix>,
        config: &SolverConfig,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        if x.nrows() != y.len() {
            return Err(SolverError::DimensionMismatch {
                design: x.nrows(),
                response: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        let p = x.ncols();
        let mut gram = x.tr_mul(&x);
        let mut xty = x.tr_mul(&y);
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let s = gram[(j, j)].sqrt();
                if config.standardize && s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        if config.standardize {
            for j in 0..p {
                xty[j] /= scale[j];
                for i in 0..p {
                    gram[(i, j)] /= scale[i] * scale[j];
                }
            }
        }
        Ok(Self {
            x,
            y,
            n_data,
            scale,
            gram,
            xty,
            back,
        })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_data_rows(&self) -> usize {
        self.n_data
    }

    pub fn column_scales(&self) -> &[f64] {
        &self.scale
    }

    /// Top of the penalty grid: the lasso bound `2·max_j |x̃_jᵀ y|`, raised for
    /// `q < 1` to the level at which every coordinate thresholds to zero
    /// from the origin, so the path always starts at the empty model.
    pub fn lambda_max(&self, q: f64) -> f64 {
        let m = self.xty.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lasso = 2.0 * m;
        if q < 1.0 {
            lasso.max(zero_threshold_constant(q) * m.powf(2.0 - q) * (1.0 + 1e-9))
        } else {
            lasso
        }
    }

    pub fn lambda_grid(&self, config: &SolverConfig) -> Result<Vec<f64>, SolverError> {
        config.validate()?;
        let lmax = self.lambda_max(config.q);
        if !(lmax > 0.0) {
            return Err(SolverError::ZeroResponse);
        }
        Ok(log_grid(lmax, config.lambda_min_ratio, config.lambda_grid_size))
    }

    /// Objective minimized by the solver, evaluated at `theta`:
    /// `‖y - Xθ‖² + lam Σ|s_j θ_j|^q` with `s_j` the column scales.
    pub fn objective(&self, theta: &[f64], lam: f64, q: f64) -> f64 {
        let th = DVector::from_column_slice(theta);
        let r = self.y.as_ref() - self.x.as_ref() * th;
        let pen: f64 = theta
            .iter()
            .zip(&self.scale)
            .map(|(t, s)| (t * s).abs().powf(q))
            .sum();
        r.norm_squared() + lam * pen
    }

    fn rss_data(&self, theta: &[f64]) -> f64 {
        let mut r = self.y.rows(0, self.n_data).into_owned();
        for (j, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                r.axpy(-t, &self.x.view((0, j), (self.n_data, 1)).column(0), 1.0);
            }
        }
        r.norm_squared()
    }

    fn finish(&self, lam: f64, q: f64, theta: Vec<f64>, iterations: usize, converged: bool) -> BridgeFit {
        let selected: Vec<usize> = (0..theta.len()).filter(|&j| theta[j] != 0.0).collect();
        let beta_hat = match self.back {
            Some(b) => b.mul_vec(&theta),
            None => theta.clone(),
        };
        let rss = self.rss_data(&theta);
        let bic = bic(rss, selected.len(), self.n_data);
        BridgeFit {
            lambda: lam,
            q,
            theta_hat: theta,
            beta_hat,
            selected,
            rss,
            bic,
            iterations,
            converged,
        }
    }

    /// Fits one penalty level, optionally from a warm start in θ-coordinates.
    pub fn fit(
        &self,
        lam: f64,
        config: &SolverConfig,
        warm_start: Option<&[f64]>,
    ) -> Result<BridgeFit, SolverError> {
        config.validate()?;
        if !(lam >= 0.0 && lam.is_finite()) {
            return Err(SolverError::InvalidLambda(lam));
        }
        let p = self.p();
        if let Some(w) = warm_start {
            if w.len() != p {
                return Err(SolverError::WarmStartLength {
                    got: w.len(),
                    expected: p,
                });
            }
        }
        if lam == 0.0 {
            return self.least_squares(config.q);
        }
        let q = config.q;
        let mut phi: Vec<f64> = match warm_start {
            Some(w) => w.iter().zip(&self.scale).map(|(t, s)| t * s).collect(),
            None => vec![0.0; p],
        };
        // c = X̃ᵀ(y - X̃φ)
        let mut c = self.xty.clone();
        for j in 0..p {
            if phi[j] != 0.0 {
                c.axpy(-phi[j], &self.gram.column(j), 1.0);
            }
        }

        let mut iterations = 0;
        let mut converged = false;
        let mut active_only = false;
        while iterations < config.max_iterations {
            iterations += 1;
            let mut max_delta = 0.0f64;
            for j in 0..p {
                if active_only && phi[j] == 0.0 {
                    continue;
                }
                let gjj = self.gram[(j, j)];
                if gjj <= 0.0 {
                    continue;
                }
                let a = (c[j] + gjj * phi[j]) / gjj;
                let new = scalar_bridge_threshold(a, lam / gjj, q);
                let delta = new - phi[j];
                if delta != 0.0 {
                    c.axpy(-delta, &self.gram.column(j), 1.0);
                    phi[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            let size = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let small = max_delta == 0.0 || max_delta <= config.tolerance * size;
            if small {
                if active_only {
                    active_only = false;
                } else {
                    converged = true;
                    break;
                }
            } else {
                active_only = true;
            }
        }
        let theta: Vec<f64> = phi.iter().zip(&self.scale).map(|(f, s)| f / s).collect();
        Ok(self.finish(lam, q, theta, iterations, converged))
    }

    fn least_squares(&self, q: f64) -> Result<BridgeFit, SolverError> {
        let chol = self
            .gram
            .clone()
            .cholesky()
            .ok_or(SolverError::RankDeficientAtZeroLambda)?;
        let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let diag_max = chol.l_dirty().diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
        if !(diag_min > diag_max * 1e-10) {
            return Err(SolverError::RankDeficientAtZeroLambda);
        }
        let phi = chol.solve(&self.xty);
        let theta: Vec<f64> = phi.iter().zip(&self.scale).map(|(f, s)| f / s).collect();
        Ok(self.finish(0.0, q, theta, 1, true))
    }

    /// Fits the descending grid with warm starts and returns the BIC-minimizing
    /// fit (ties go to the larger λ) with a summary of every point.
    pub fn fit_path_bic(&self, config: &SolverConfig) -> Result<(BridgeFit, Vec<PathPoint>), SolverError> {
        let grid = self.lambda_grid(config)?;
        self.fit_path_on_grid(&grid, config)
    }

    pub fn fit_path_on_grid(
        &self,
        grid: &[f64],
        config: &SolverConfig,
    ) -> Result<(BridgeFit, Vec<PathPoint>), SolverError> {
        let mut best: Option<BridgeFit> = None;
        let mut path = Vec::with_capacity(grid.len());
        let mut warm: Option<Vec<f64>> = None;
        for &lam in grid {
            let fit = self.fit(lam, config, warm.as_deref())?;
            path.push(PathPoint {
                lambda: lam,
                support_size: fit.selected.len(),
                rss: fit.rss,
                bic: fit.bic,
                iterations: fit.iterations,
                converged: fit.converged,
            });
            warm = Some(fit.theta_hat.clone());
            if best.as_ref().is_none_or(|b| fit.bic < b.bic) {
                best = Some(fit);
            }
        }
        best.map(|b| (b, path))
            .ok_or_else(|| SolverError::InvalidConfig("empty lambda grid".into()))
    }
}

/// `k` such that `scalar_bridge_threshold(z, λ, q) == 0` exactly when
/// `λ ≥ k|z|^(2-q)`.
fn zero_threshold_constant(q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 4.0);
    while scalar_bridge_threshold(1.0, hi, q) != 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if scalar_bridge_threshold(1.0, mid, q) == 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `n·ln(rss/n) + k·ln(n)`.
pub fn bic(rss: f64, support: usize, n: usize) -> f64 {
    let n = n as f64;
    n * (rss.max(f64::MIN_POSITIVE) / n).ln() + support as f64 * n.ln()
}

/// `size` values log-spaced from `lmax` down to `ratio·lmax`.
pub fn log_grid(lmax: f64, ratio: f64, size: usize) -> Vec<f64> {
    if size == 1 {
        return vec![lmax];
    }
    let step = ratio.ln() / (size - 1) as f64;
    (0..size)
        .map(|k| {
            if k == 0 {
                lmax
            } else if k == size - 1 {
                lmax * ratio
            } else {
                lmax * (step * k as f64).exp()
            }
        })
        .collect()
}

pub fn bridge_fit(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    lam: f64,
    config: &SolverConfig,
    warm_start: Option<&[f64]>,
) -> Result<BridgeFit, SolverError> {
    BridgeProblem::new(design, response, config)?.fit(lam, config, warm_start)
}

pub fn lambda_grid(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    config: &SolverConfig,
) -> Result<Vec<f64>, SolverError> {
    BridgeProblem::new(design, response, config)?.lambda_grid(config)
}

pub fn fit_path_bic(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    config: &SolverConfig,
) -> Result<(BridgeFit, Vec<PathPoint>), SolverError> {
    BridgeProblem::new(design, response, config)?.fit_path_bic(config)
}

/// Appends `√λ₂·D⁻¹` below the design and `p` zeros to the response.
pub fn ridge_augment(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    fusion: &FusionMatrix,
    lambda2: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), SolverError> {
    if !(lambda2 > 0.0 && lambda2.is_finite()) {
        return Err(SolverError::InvalidConfig("ridge lambda2 must be positive".into()));
    }
    let (n, p) = design.shape();
    if fusion.p() != p {
        return Err(SolverError::DimensionMismatch {
            design: p,
            response: fusion.p(),
        });
    }
    if response.len() != n {
        return Err(SolverError::DimensionMismatch {
            design: n,
            response: response.len(),
        });
    }
    let root = lambda2.sqrt();
    let mut x = DMatrix::zeros(n + p, p);
    x.view_mut((0, 0), (n, p)).copy_from(design);
    for i in 0..p {
        for (j, v) in fusion.d_inv().row(i) {
            x[(n + i, j)] = root * v;
        }
    }
    let mut y = DVector::zeros(n + p);
    y.rows_mut(0, n).copy_from(response);
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignLayout;
    use crate::fusion::build_fusion;

    fn pseudo(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(n, p, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn closed_forms() {
        assert_eq!(scalar_bridge_threshold(1.0, 1.0, 2.0), 0.5);
        assert_eq!(scalar_bridge_threshold(1.0, 1.0, 1.0), 0.5);
        assert_eq!(scalar_bridge_threshold(-1.0, 3.0, 1.0), 0.0);
        assert_eq!(scalar_bridge_threshold(-2.5, 0.0, 0.5), -2.5);
        assert_eq!(scalar_bridge_threshold(0.0, 1.0, 0.5), 0.0);
    }

    #[test]
    fn sign_symmetry() {
        for &q in &[0.3, 0.5, 1.0, 1.5, 2.0] {
            for &z in &[0.1, 0.9, 2.0, 7.0] {
                let a = scalar_bridge_threshold(z, 0.7, q);
                let b = scalar_bridge_threshold(-z, 0.7, q);
                assert_eq!(a, -b);
                assert!(a >= 0.0);
            }
        }
    }

    #[test]
    fn half_threshold_jumps() {
        // for q = 1/2 the smallest nonzero solution is bounded away from 0
        let lam = 1.0;
        let mut last = 0.0;
        let mut z = 0.0;
        while z < 3.0 {
            let t = scalar_bridge_threshold(z, lam, 0.5);
            if last == 0.0 && t != 0.0 {
                assert!(t > 0.3, "first nonzero {t} at z={z}");
            }
            last = t;
            z += 1e-3;
        }
    }

    #[test]
    fn closed_form_zero_level() {
        for q in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let k = zero_threshold_constant(q);
            assert!((k - zero_level(q)).abs() <= 1e-8 * k, "q = {q}");
            assert!(scalar_bridge_threshold(1.0, k * (1.0 - 1e-6), q) != 0.0);
        }
    }

    #[test]
    fn grid_geometry() {
        let g = log_grid(10.0, 1e-4, 100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 10.0);
        assert!((g[99] - 1e-3).abs() < 1e-15);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
        assert_eq!(log_grid(3.0, 1e-4, 1), vec![3.0]);
    }

    #[test]
    fn zero_response() {
        let x = pseudo(10, 3, 1);
        let y = DVector::zeros(10);
        let cfg = SolverConfig::default();
        assert_eq!(lambda_grid(&x, &y, &cfg), Err(SolverError::ZeroResponse));
        let fit = bridge_fit(&x, &y, 0.5, &cfg, None).unwrap();
        assert!(fit.theta_hat.iter().all(|&v| v == 0.0));
        assert_eq!(fit.rss, 0.0);
        assert!(fit.selected.is_empty());
    }

    #[test]
    fn lambda_zero_is_least_squares() {
        let x = pseudo(8, 3, 7);
        let y = DVector::from_fn(8, |i, _| (i as f64).sin());
        let fit = bridge_fit(&x, &y, 0.0, &SolverConfig::default(), None).unwrap();
        let ls = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        for j in 0..3 {
            assert!((fit.theta_hat[j] - ls[j]).abs() < 1e-8);
        }
        let mut rank_def = x.clone();
        let c0 = rank_def.column(0).into_owned();
        rank_def.set_column(2, &(c0 * 2.0));
        assert_eq!(
            bridge_fit(&rank_def, &y, 0.0, &SolverConfig::default(), None),
            Err(SolverError::RankDeficientAtZeroLambda)
        );
    }

    #[test]
    fn bic_prefers_smaller_rss() {
        assert!(bic(1.0, 3, 100) < bic(2.0, 3, 100));
    }

    #[test]
    fn single_point_path() {
        let x = pseudo(30, 4, 3);
        let y = DVector::from_fn(30, |i, _| (i % 5) as f64 - 2.0);
        let cfg = SolverConfig {
            lambda_grid_size: 1,
            ..Default::default()
        };
        let (best, path) = fit_path_bic(&x, &y, &cfg).unwrap();
        assert_eq!(path.len(), 1);
        let direct = bridge_fit(&x, &y, path[0].lambda, &cfg, None).unwrap();
        assert_eq!(best, direct);
    }

    #[test]
    fn generalized_ridge_oracle() {
        let l = DesignLayout::new(2, &[2], 0).unwrap();
        let f = build_fusion(&l);
        assert_eq!(f.p(), 3);
        let x = pseudo(6, 3, 11);
        let y = DVector::from_fn(6, |i, _| i as f64 * 0.3 - 0.7);
        let (lam, lam2) = (0.8, 0.4);
        let cfg = SolverConfig {
            q: 2.0,
            ridge_lambda2: lam2,
            standardize: false,
            tolerance: 1e-14,
            max_iterations: 100_000,
            ..Default::default()
        };
        let prob = BridgeProblem::with_fusion(&x, &y, &f, &cfg).unwrap();
        let fit = prob.fit(lam, &cfg, None).unwrap();
        let dinv = f.d_inv().to_dense();
        let a = x.transpose() * &x
            + DMatrix::<f64>::identity(3, 3) * lam
            + dinv.transpose() * &dinv * lam2;
        let oracle = a.cholesky().unwrap().solve(&(x.transpose() * &y));
        for j in 0..3 {
            assert!((fit.theta_hat[j] - oracle[j]).abs() < 1e-8);
        }
        let (xa, ya) = ridge_augment(&x, &y, &f, lam2).unwrap();
        assert_eq!(xa.nrows(), 6 + 3);
        assert_eq!(ya.len(), 9);
    }

    #[test]
    fn vanishing_augmentation() {
        let l = DesignLayout::new(3, &[2, 3], 0).unwrap();
        let f = build_fusion(&l);
        let p = f.p();
        let x = pseudo(40, p, 5);
        let y = DVector::from_fn(40, |i, _| ((i * 7) % 11) as f64 - 5.0);
        let base = SolverConfig::default();
        let aug = SolverConfig {
            ridge_lambda2: 1e-12,
            ..base.clone()
        };
        let a = BridgeProblem::with_fusion(&x, &y, &f, &base).unwrap().fit(3.0, &base, None).unwrap();
        let b = BridgeProblem::with_fusion(&x, &y, &f, &aug).unwrap().fit(3.0, &aug, None).unwrap();
        assert_eq!(a.selected, b.selected);
        for j in 0..p {
            assert!((a.theta_hat[j] - b.theta_hat[j]).abs() < 1e-6);
        }
        assert_eq!(a.beta_hat, f.invert(&a.theta_hat));
    }
}
