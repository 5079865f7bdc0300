//! Shared helpers for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::procrustes::Configuration;
use crate::sphere::SpherePoint;

pub fn random_configuration(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Configuration {
    loop {
        let pts = DMatrix::from_fn(k, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        if let Ok(c) = Configuration::new(pts) {
            return c;
        }
    }
}

/// Haar-ish random rotation: QR of a Gaussian matrix with the determinant
/// forced to +1.
pub fn random_rotation(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for i in 0..m {
        if r[(i, i)] < 0.0 {
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    if q.determinant() < 0.0 {
        let last = m - 1;
        for row in 0..m {
            q[(row, last)] = -q[(row, last)];
        }
    }
    q
}

pub fn random_sphere_point(rng: &mut ChaCha8Rng, dim: usize) -> SpherePoint {
    loop {
        let v = DVector::from_fn(dim + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        if v.norm() > 1e-3 {
            return SpherePoint::from_unnormalized(v).unwrap();
        }
    }
}
