#![allow(dead_code)]

use fetwfe::panel::PanelDataset;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Panel with every cohort (and the never-treated group) holding at least
/// `d + 1` units, assigned round-robin.
pub fn random_panel(seed: u64, n: usize, t: usize, cohorts: &[usize], d: usize) -> PanelDataset {
    let mut r = rng(seed);
    let labels: Vec<usize> = std::iter::once(0).chain(cohorts.iter().copied()).collect();
    let assignment: Vec<usize> = (0..n).map(|i| labels[i % labels.len()]).collect();
    let x = normal_matrix(&mut r, n, d);
    let y = normal_matrix(&mut r, n, t);
    PanelDataset::new(assignment, x, y).expect("valid panel")
}

/// The `k` orthonormal columns of a QR factor of a random `n x k` matrix.
pub fn orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, n, k);
    a.qr().q().columns(0, k).into_owned()
}
