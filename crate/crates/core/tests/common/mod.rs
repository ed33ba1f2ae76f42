//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use afss::spectral::Hypercolumn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian features with a shared positive offset, so cosine affinities
/// are mostly positive and the graph is connected.
pub fn random_hypercolumn(h: usize, w: usize, dims: usize, seed: u64) -> Hypercolumn {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let feats = (0..h * w * dims).map(|_| 0.6 + normal.sample(&mut r)).collect();
    Hypercolumn::from_rows(h, w, dims, feats).unwrap()
}

/// Centered disk covering a quarter of a `size x size` grid.
pub fn disk_mask(size: usize) -> Vec<bool> {
    let radius2 = 0.25 * (size * size) as f64 / std::f64::consts::PI;
    let c = (size as f64 - 1.0) / 2.0;
    (0..size * size)
        .map(|i| {
            let (r, col) = ((i / size) as f64, (i % size) as f64);
            (r - c).powi(2) + (col - c).powi(2) <= radius2
        })
        .collect()
}

/// Two Gaussian feature clusters laid out as a centered disk on background.
pub fn disk_hypercolumn(size: usize, dims: usize, noise: f64, seed: u64) -> (Hypercolumn, Vec<bool>) {
    let mask = disk_mask(size);
    let mut r = rng(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let mut feats = Vec::with_capacity(size * size * dims);
    for &inside in &mask {
        for d in 0..dims {
            let mean = match (inside, d) {
                (true, 0) | (false, 1) => 1.0,
                (_, 2) => 0.3,
                _ => 0.0,
            };
            feats.push(mean + normal.sample(&mut r));
        }
    }
    (Hypercolumn::from_rows(size, size, dims, feats).unwrap(), mask)
}

/// Eigenvalues of a symmetric row-major matrix from an independent solver,
/// ascending.
pub fn oracle_eigenvalues(n: usize, data: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, data);
    let mut v: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn agreement(a: &[bool], b: &[bool]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}
