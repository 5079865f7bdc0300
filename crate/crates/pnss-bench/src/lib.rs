//! Deterministic input generators shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pnss_core::procrustes::Configuration;
use pnss_core::sphere::SpherePoint;

/// Uniform-ish points on S^dim.
pub fn sphere_cloud(n: usize, dim: usize, seed: u64) -> Vec<SpherePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v = DVector::from_fn(dim + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            if v.norm() > 1e-3 {
                break SpherePoint::from_unnormalized(v).unwrap();
            }
        })
        .collect()
}

/// Random full-rank configurations with k landmarks in R^m.
pub fn configurations(n: usize, k: usize, m: usize, seed: u64) -> Vec<Configuration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let pts = DMatrix::from_fn(k, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            if let Ok(c) = Configuration::new(pts) {
                break c;
            }
        })
        .collect()
}
