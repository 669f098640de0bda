//! Fusion differences matrix `D` and its closed-form inverse.
//!
//! `θ = Dβ` collects the penalized differences: adjacent cohort and time
//! fixed effects (and their covariate interactions), covariate main effects
//! directly, and for the treatment effects the within-cohort adjacent-time
//! differences plus the differences between consecutive cohorts' first
//! effects. `D` is block diagonal; every block and its inverse are built
//! from closed forms, never by numerical inversion.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::design::DesignLayout;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("fusion blocks do not tile the {p} columns (gap or overlap at {at})")]
    BadTiling { p: usize, at: usize },
    #[error("fusion block at offset {offset} is not square or its inverse has the wrong shape")]
    BadBlockShape { offset: usize },
    #[error("fusion block at offset {offset} has non-finite entries")]
    NonFinite { offset: usize },
    #[error("fusion block at offset {offset}: D * D^-1 deviates from identity by {residual:e}")]
    NotInverse { offset: usize, residual: f64 },
    #[error("vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; zeros are dropped and
    /// duplicates summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows_of: Vec<usize> = Vec::with_capacity(triplets.len());
        for (i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                rows_of.push(i);
                last = Some((i, j));
            }
        }
        let mut k = 0;
        let mut ci = Vec::with_capacity(col_idx.len());
        let mut vs = Vec::with_capacity(values.len());
        for i in 0..nrows {
            row_ptr[i] = ci.len();
            while k < rows_of.len() && rows_of[k] == i {
                if values[k] != 0.0 {
                    ci.push(col_idx[k]);
                    vs.push(values[k]);
                }
                k += 1;
            }
        }
        row_ptr[nrows] = ci.len();
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx: ci,
            values: vs,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn ncols(&self) -> usize {
        self.ncols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `Sᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * xi;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Dense product `Z S`.
    pub fn left_mul_dense(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(z.ncols(), self.nrows);
        let mut out = DMatrix::zeros(z.nrows(), self.ncols);
        for i in 0..self.nrows {
            let zi = z.column(i);
            for (j, v) in self.row(i) {
                out.column_mut(j).axpy(v, &zi, 1.0);
            }
        }
        out
    }

    /// Columns `cols` of `Z S`, in the given order.
    pub fn left_mul_dense_columns(&self, z: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
        assert_eq!(z.ncols(), self.nrows);
        let mut slot = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            slot[c] = k;
        }
        let mut out = DMatrix::zeros(z.nrows(), cols.len());
        for i in 0..self.nrows {
            let zi = z.column(i);
            for (j, v) in self.row(i) {
                if slot[j] != usize::MAX {
                    out.column_mut(slot[j]).axpy(v, &zi, 1.0);
                }
            }
        }
        out
    }
}

/// `t x t` upper bidiagonal differences block: 1 on the diagonal, -1 on
/// the superdiagonal.
pub fn build_d1(t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| {
        if i == j {
            1.0
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Inverse of [`build_d1`]: upper triangular ones.
pub fn d1_inverse(t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| if j >= i { 1.0 } else { 0.0 })
}

fn tau_starts(n_times: usize, cohorts: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    cohorts
        .iter()
        .map(|&r| {
            let s = acc;
            acc += n_times - r + 1;
            s
        })
        .collect()
}

/// Treatment-effect differences block for τ stacked cohort-major.
///
/// Row for `τ_{r1,r1}` picks it directly; row for `τ_{rk,rk}` (k ≥ 2) is
/// `τ_{rk,rk} - τ_{r(k-1),r(k-1)}`; row for `τ_{rk,t}` (t > rk) is
/// `τ_{rk,t} - τ_{rk,t-1}`.
pub fn build_d2(n_times: usize, cohorts: &[usize]) -> DMatrix<f64> {
    let starts = tau_starts(n_times, cohorts);
    let w: usize = cohorts.iter().map(|&r| n_times - r + 1).sum();
    let mut d = DMatrix::zeros(w, w);
    for (k, &r) in cohorts.iter().enumerate() {
        let s = starts[k];
        d[(s, s)] = 1.0;
        if k > 0 {
            d[(s, starts[k - 1])] = -1.0;
        }
        for off in 1..=(n_times - r) {
            d[(s + off, s + off)] = 1.0;
            d[(s + off, s + off - 1)] = -1.0;
        }
    }
    d
}

/// Closed-form inverse of [`build_d2`]:
/// `τ_{rk,t} = Σ_{k' ≤ k} θ_{rk',rk'} + Σ_{rk < t' ≤ t} θ_{rk,t'}`.
pub fn d2_inverse(n_times: usize, cohorts: &[usize]) -> DMatrix<f64> {
    let starts = tau_starts(n_times, cohorts);
    let w: usize = cohorts.iter().map(|&r| n_times - r + 1).sum();
    let mut inv = DMatrix::zeros(w, w);
    for (k, &r) in cohorts.iter().enumerate() {
        for off in 0..=(n_times - r) {
            let row = starts[k] + off;
            for &s in &starts[..=k] {
                inv[(row, s)] = 1.0;
            }
            for o in 1..=off {
                inv[(row, starts[k] + o)] = 1.0;
            }
        }
    }
    inv
}

/// One diagonal block of `D` together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub offset: usize,
    pub d: DMatrix<f64>,
    pub d_inv: DMatrix<f64>,
}

impl FusionBlock {
    pub fn size(&self) -> usize {
        self.d.nrows()
    }
}

/// Produces the diagonal blocks of an invertible block-diagonal
/// differences matrix for a layout.
pub trait FusionStructure {
    fn blocks(&self, layout: &DesignLayout) -> Vec<FusionBlock>;
}

/// The default fusion penalty structure.
#[derive(Debug, Clone, Copy, Default)]
pub struct StaggeredFusion;

/// `D = I`: penalizes every coefficient directly (plain bridge regression).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFusion;

impl FusionStructure for StaggeredFusion {
    fn blocks(&self, layout: &DesignLayout) -> Vec<FusionBlock> {
        let r = layout.n_cohorts();
        let tm1 = layout.n_times() - 1;
        let d = layout.n_covariates();
        let w = layout.w_count();
        let o = layout.offsets();
        let d1r = (build_d1(r), d1_inverse(r));
        let d1t = (build_d1(tm1), d1_inverse(tm1));
        let d2 = (
            build_d2(layout.n_times(), layout.cohorts()),
            d2_inverse(layout.n_times(), layout.cohorts()),
        );
        let block = |offset: usize, pair: &(DMatrix<f64>, DMatrix<f64>)| FusionBlock {
            offset,
            d: pair.0.clone(),
            d_inv: pair.1.clone(),
        };
        let one = (DMatrix::identity(1, 1), DMatrix::identity(1, 1));

        let mut blocks = vec![block(o.cohort_fe, &d1r), block(o.time_fe, &d1t)];
        blocks.extend((0..d).map(|j| block(o.covariates + j, &one)));
        blocks.extend((0..d).map(|j| block(o.cohort_cov + j * r, &d1r)));
        blocks.extend((0..d).map(|j| block(o.time_cov + j * tm1, &d1t)));
        blocks.push(block(o.treatment, &d2));
        blocks.extend((0..d).map(|j| block(o.treatment_cov + j * w, &d2)));
        blocks.retain(|b| b.size() > 0);
        blocks
    }
}

impl FusionStructure for IdentityFusion {
    fn blocks(&self, layout: &DesignLayout) -> Vec<FusionBlock> {
        (0..layout.p())
            .map(|j| FusionBlock {
                offset: j,
                d: DMatrix::identity(1, 1),
                d_inv: DMatrix::identity(1, 1),
            })
            .collect()
    }
}

/// `D` and `D⁻¹` for a layout, stored sparse, plus the dense blocks.
#[derive(Debug, Clone)]
pub struct FusionMatrix {
    p: usize,
    blocks: Vec<FusionBlock>,
    d: SparseMatrix,
    d_inv: SparseMatrix,
}

impl FusionMatrix {
    pub fn from_structure<S: FusionStructure + ?Sized>(
        layout: &DesignLayout,
        structure: &S,
    ) -> Result<Self, FusionError> {
        let p = layout.p();
        let mut blocks = structure.blocks(layout);
        blocks.sort_by_key(|b| b.offset);
        let mut next = 0;
        let mut dt = Vec::new();
        let mut it = Vec::new();
        for b in &blocks {
            let s = b.size();
            if b.offset != next {
                return Err(FusionError::BadTiling { p, at: next });
            }
            if b.d.ncols() != s || b.d_inv.shape() != (s, s) {
                return Err(FusionError::BadBlockShape { offset: b.offset });
            }
            if b.d.iter().chain(b.d_inv.iter()).any(|v| !v.is_finite()) {
                return Err(FusionError::NonFinite { offset: b.offset });
            }
            let residual = (&b.d * &b.d_inv - DMatrix::<f64>::identity(s, s)).amax();
            if residual > 1e-12 {
                return Err(FusionError::NotInverse {
                    offset: b.offset,
                    residual,
                });
            }
            for i in 0..s {
                for j in 0..s {
                    if b.d[(i, j)] != 0.0 {
                        dt.push((b.offset + i, b.offset + j, b.d[(i, j)]));
                    }
                    if b.d_inv[(i, j)] != 0.0 {
                        it.push((b.offset + i, b.offset + j, b.d_inv[(i, j)]));
                    }
                }
            }
            next += s;
        }
        if next != p {
            return Err(FusionError::BadTiling { p, at: next });
        }
        Ok(Self {
            p,
            blocks,
            d: SparseMatrix::from_triplets(p, p, dt),
            d_inv: SparseMatrix::from_triplets(p, p, it),
        })
    }

    pub fn identity(layout: &DesignLayout) -> Self {
        Self::from_structure(layout, &IdentityFusion).expect("identity structure is valid")
    }

    pub fn p(&self) -> usize {
        self.p
    }
    pub fn d(&self) -> &SparseMatrix {
        &self.d
    }
    pub fn d_inv(&self) -> &SparseMatrix {
        &self.d_inv
    }
    pub fn blocks(&self) -> &[FusionBlock] {
        &self.blocks
    }

    /// `θ = Dβ`.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        self.d.mul_vec(beta)
    }

    /// `β = D⁻¹θ`.
    pub fn invert(&self, theta: &[f64]) -> Vec<f64> {
        self.d_inv.mul_vec(theta)
    }

    /// Singular values of `D`, computed block by block.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p);
        for b in &self.blocks {
            let svd = b.d.clone().svd(false, false);
            out.extend(svd.singular_values.iter().copied());
        }
        out
    }
}

/// The default fusion matrix for a layout.
pub fn build_fusion(layout: &DesignLayout) -> FusionMatrix {
    FusionMatrix::from_structure(layout, &StaggeredFusion)
        .expect("closed-form fusion blocks are exact inverses")
}

/// `‖Dβ‖_q^q`.
pub fn penalty_value(beta: &[f64], q: f64, fusion: &FusionMatrix) -> Result<f64, FusionError> {
    if beta.len() != fusion.p() {
        return Err(FusionError::Length {
            got: beta.len(),
            expected: fusion.p(),
        });
    }
    Ok(fusion
        .apply(beta)
        .iter()
        .map(|v| v.abs().powf(q))
        .sum())
}

/// Dense helper used by tests and diagnostics.
pub fn dense_product_residual(fusion: &FusionMatrix) -> f64 {
    let d = fusion.d().to_dense();
    let inv = fusion.d_inv().to_dense();
    let eye = DMatrix::<f64>::identity(fusion.p(), fusion.p());
    (&d * &inv - &eye).amax().max((&inv * &d - eye).amax())
}

impl From<&FusionMatrix> for DMatrix<f64> {
    fn from(f: &FusionMatrix) -> Self {
        f.d().to_dense()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn d1_small() {
        let d = build_d1(3);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(3, 3, &[
            1.0, -1.0, 0.0,
            0.0, 1.0, -1.0,
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(d, expected);
        assert_eq!(build_d1(1), DMatrix::identity(1, 1));
        #[rustfmt::skip]
        let ones = DMatrix::from_row_slice(3, 3, &[
            1.0, 1.0, 1.0,
            0.0, 1.0, 1.0,
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(d1_inverse(3), ones);
        assert_eq!(&d * d1_inverse(3), DMatrix::identity(3, 3));
    }

    #[test]
    fn d2_two_cohorts() {
        // (τ22, τ23, τ33) -> (τ22, τ23 - τ22, τ33 - τ22)
        let d = build_d2(3, &[2, 3]);
        let tau = DVector::from_row_slice(&[1.5, 4.0, -2.0]);
        let out = &d * &tau;
        assert_eq!(out.as_slice(), &[1.5, 2.5, -3.5]);
        assert_eq!(build_d2(2, &[2]), DMatrix::identity(1, 1));
    }

    #[test]
    fn d2_inverse_is_exact() {
        let d = build_d2(6, &[2, 4, 5]);
        let inv = d2_inverse(6, &[2, 4, 5]);
        let w = d.nrows();
        assert_eq!(&d * &inv, DMatrix::identity(w, w));
        assert_eq!(&inv * &d, DMatrix::identity(w, w));
        assert!(inv.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn no_covariates_single_cohort_is_identity() {
        let l = DesignLayout::new(2, &[2], 0).unwrap();
        let f = build_fusion(&l);
        assert_eq!(f.d().to_dense(), DMatrix::identity(3, 3));
    }

    #[test]
    fn penalty_zero_and_unit() {
        let l = DesignLayout::new(5, &[2, 3, 4], 2).unwrap();
        let f = build_fusion(&l);
        assert_eq!(penalty_value(&vec![0.0; 50], 0.5, &f).unwrap(), 0.0);
        for j in [0, 7, 33, 49] {
            let mut e = vec![0.0; 50];
            e[j] = 1.0;
            let beta = f.invert(&e);
            for q in [0.3, 0.5, 1.0, 2.0] {
                let v = penalty_value(&beta, q, &f).unwrap();
                assert!((v - 1.0).abs() < 1e-14, "j={j} q={q} v={v}");
            }
        }
    }

    #[test]
    fn rejects_bad_structure() {
        struct Broken;
        impl FusionStructure for Broken {
            fn blocks(&self, layout: &DesignLayout) -> Vec<FusionBlock> {
                (0..layout.p())
                    .map(|j| FusionBlock {
                        offset: j,
                        d: DMatrix::from_element(1, 1, 2.0),
                        d_inv: DMatrix::identity(1, 1),
                    })
                    .collect()
            }
        }
        let l = DesignLayout::new(3, &[2], 0).unwrap();
        assert!(matches!(
            FusionMatrix::from_structure(&l, &Broken),
            Err(FusionError::NotInverse { .. })
        ));
    }

    #[test]
    fn sparse_products_match_dense() {
        let l = DesignLayout::new(4, &[2, 3], 1).unwrap();
        let f = build_fusion(&l);
        let p = l.p();
        let z = DMatrix::from_fn(7, p, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0);
        let dense = &z * f.d_inv().to_dense();
        assert_eq!(f.d_inv().left_mul_dense(&z), dense);
        let cols = [3, 0, p - 1];
        let sel = f.d_inv().left_mul_dense_columns(&z, &cols);
        for (k, &c) in cols.iter().enumerate() {
            assert_eq!(sel.column(k), dense.column(c));
        }
        let x: Vec<f64> = (0..p).map(|i| i as f64 * 0.5 - 3.0).collect();
        let a = f.d_inv().tr_mul_vec(&x);
        let b = f.d_inv().to_dense().transpose() * DVector::from_column_slice(&x);
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
