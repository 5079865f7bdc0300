//! Elementary Riemannian geometry of the unit sphere S^d embedded in R^(d+1):
//! distances, exponential/log maps, subsphere projection, rotations to a pole
//! and circular Fréchet means.
//!
//! All operations are pure functions on immutable inputs and safe to call
//! concurrently.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance for the unit-norm invariant of [`SpherePoint`].
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Tolerance for the tangency invariant of [`TangentVector`].
pub const TANGENT_TOL: f64 = 1e-10;
/// Distance from π below which two points are treated as antipodal.
pub const ANTIPODAL_TOL: f64 = 1e-9;

/// A point on the unit sphere S^d, stored as a unit vector in R^(d+1).
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: DVector<f64>,
}

impl SpherePoint {
    /// Build from coordinates that must already have unit norm (within
    /// [`UNIT_NORM_TOL`]) and length ≥ 2.
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Dimension(format!(
                "sphere point needs at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        let norm = coords.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Range(format!(
                "sphere point norm {norm} deviates from 1 by more than {UNIT_NORM_TOL:e}"
            )));
        }
        Ok(Self { coords })
    }

    /// Normalize an arbitrary nonzero vector onto the sphere.
    pub fn from_unnormalized(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Dimension(format!(
                "sphere point needs at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        let norm = coords.norm();
        if norm < 1e-300 {
            return Err(Error::Range("cannot normalize the zero vector".into()));
        }
        Ok(Self {
            coords: coords / norm,
        })
    }

    /// Intrinsic dimension d of the sphere this point lives on.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }
}

/// A tangent vector attached to a base point, orthogonal to it.
#[derive(Debug, Clone)]
pub struct TangentVector {
    base: SpherePoint,
    vec: DVector<f64>,
}

impl TangentVector {
    pub fn new(base: SpherePoint, vec: DVector<f64>) -> Result<Self> {
        if vec.len() != base.coords().len() {
            return Err(Error::Dimension(format!(
                "tangent vector length {} does not match base length {}",
                vec.len(),
                base.coords().len()
            )));
        }
        let inner = vec.dot(base.coords());
        if inner.abs() > TANGENT_TOL {
            return Err(Error::Range(format!(
                "tangent vector has component {inner:e} along the base point \
                 (tolerance {TANGENT_TOL:e})"
            )));
        }
        Ok(Self { base, vec })
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn vec(&self) -> &DVector<f64> {
        &self.vec
    }

    pub fn norm(&self) -> f64 {
        self.vec.norm()
    }
}

/// A subsphere A(v, r) = {x ∈ S^i : ρ(v, x) = r} of the sphere its axis
/// lives on. A great subsphere has r = π/2.
#[derive(Debug, Clone)]
pub struct Subsphere {
    axis: SpherePoint,
    radius: f64,
}

impl Subsphere {
    pub fn new(axis: SpherePoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius <= FRAC_PI_2) {
            return Err(Error::Range(format!(
                "subsphere radius {radius} outside (0, π/2]"
            )));
        }
        Ok(Self { axis, radius })
    }

    pub fn axis(&self) -> &SpherePoint {
        &self.axis
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Great-circle distance ρ(x, y) = arccos⟨x, y⟩ ∈ [0, π].
///
/// The inner product is clamped to [−1, 1] before arccos so that numerically
/// coincident points do not produce NaN.
pub fn spherical_distance(x: &SpherePoint, y: &SpherePoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "sphere dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(x.coords().dot(y.coords()).clamp(-1.0, 1.0).acos())
}

/// Exponential map: follow the geodesic from the base point in the direction
/// of the tangent vector for arc length ‖vec‖.
pub fn exp_map(t: &TangentVector) -> SpherePoint {
    let norm = t.norm();
    if norm == 0.0 {
        return t.base().clone();
    }
    let coords = t.base().coords() * norm.cos() + (t.vec() / norm) * norm.sin();
    // cos² + sin² keeps the norm at 1 up to rounding; renormalize for hygiene.
    SpherePoint::from_unnormalized(coords).expect("exp map output has unit norm")
}

/// Inverse of [`exp_map`]: the tangent vector at `base` pointing to `x` with
/// norm ρ(base, x). Rejects antipodal inputs, whose direction is undefined.
pub fn log_map(base: &SpherePoint, x: &SpherePoint) -> Result<TangentVector> {
    let dist = spherical_distance(base, x)?;
    if dist >= PI - ANTIPODAL_TOL {
        return Err(Error::Antipodal(ANTIPODAL_TOL));
    }
    if dist == 0.0 {
        return TangentVector::new(base.clone(), DVector::zeros(base.coords().len()));
    }
    let cos = x.coords().dot(base.coords());
    let mut dir = x.coords() - base.coords() * cos;
    // Remove any residual base component before scaling.
    let leak = dir.dot(base.coords());
    dir -= base.coords() * leak;
    let dir_norm = dir.norm();
    if dir_norm < 1e-300 {
        return TangentVector::new(base.clone(), DVector::zeros(base.coords().len()));
    }
    TangentVector::new(base.clone(), dir * (dist / dir_norm))
}

/// Geodesic projection of `x` onto the subsphere:
/// P(x) = cos(r)·v + sin(r)·(x − cos(ρ)·v)/sin(ρ) with ρ = ρ(v, x).
///
/// Undefined when `x` sits at the axis or its antipode.
pub fn project_to_subsphere(x: &SpherePoint, s: &Subsphere) -> Result<SpherePoint> {
    let rho = spherical_distance(x, s.axis())?;
    if rho < ANTIPODAL_TOL || rho > PI - ANTIPODAL_TOL {
        return Err(Error::ProjectionUndefined);
    }
    let v = s.axis().coords();
    let cos_rho = x.coords().dot(v);
    let tangential = x.coords() - v * cos_rho;
    let scale = s.radius().sin() / tangential.norm();
    let coords = v * s.radius().cos() + tangential * scale;
    SpherePoint::from_unnormalized(coords)
}

/// Rotation matrix R with R·a = b, built from two Householder reflections in
/// the plane spanned by `a` and `b`. Requires ⟨a, b⟩ not close to −1.
fn rotation_taking(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let n = a.len();
    let m = {
        let sum = a + b;
        let norm = sum.norm();
        sum / norm
    };
    // R = (I − 2bbᵀ)(I − 2mmᵀ): the first reflection sends a to −b, the
    // second sends −b to b.
    let refl_m = DMatrix::identity(n, n) - 2.0 * &m * m.transpose();
    let refl_b = DMatrix::identity(n, n) - 2.0 * b * b.transpose();
    refl_b * refl_m
}

/// A rotation carrying `v` to the pole (0, …, 0, 1) of its sphere.
///
/// Returns the identity when `v` already equals the pole. Near the antipode
/// the rotation is composed through an intermediate coordinate direction to
/// stay well conditioned.
pub fn rotate_axis_to_pole(v: &SpherePoint) -> DMatrix<f64> {
    let n = v.coords().len();
    let mut pole = DVector::zeros(n);
    pole[n - 1] = 1.0;
    if v.coords() == &pole {
        return DMatrix::identity(n, n);
    }
    let cos = v.coords().dot(&pole);
    if cos > -0.5 {
        return rotation_taking(v.coords(), &pole);
    }
    // Route via the coordinate direction least aligned with v; it is nearly
    // orthogonal to both v and the pole.
    let (j, _) = v
        .coords()
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap();
    let mut mid = DVector::zeros(n);
    mid[j] = 1.0;
    rotation_taking(&mid, &pole) * rotation_taking(v.coords(), &mid)
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Objective-tie tolerance for declaring the circular Fréchet mean non-unique.
const MEAN_TIE_TOL: f64 = 1e-9;

/// Circular Fréchet mean of a set of angles, with the signed arc deviations
/// of each angle from the mean.
///
/// The minimizer of Σ d(θ_i, μ)² is found exactly by enumerating the n
/// candidate means: each local minimum of the Fréchet function is the
/// arithmetic mean of one cyclic re-branching of the sorted data, so the
/// candidates are θ̄ + 2πk/n for k = 0, …, n−1. Ties within `1e-9` of the
/// optimal objective raise [`Error::NonUniqueMean`].
///
/// The returned mean is wrapped to (−π, π]; deviations are in (−π, π].
pub fn frechet_mean_circle(angles: &[f64]) -> Result<(f64, Vec<f64>)> {
    if angles.is_empty() {
        return Err(Error::Range("empty angle list has no Fréchet mean".into()));
    }
    let n = angles.len();
    let two_pi = 2.0 * PI;
    let mut sorted: Vec<f64> = angles.iter().map(|&t| t.rem_euclid(two_pi)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let total: f64 = sorted.iter().sum();
    let total_sq: f64 = sorted.iter().map(|t| t * t).sum();

    // Candidate k shifts the k smallest angles by +2π. Its branch objective
    // is Σψ² − n·m_k² with m_k the branch mean; prefix sums give O(1) per
    // candidate. An invalid branch only overestimates its objective, so the
    // global argmin is still found.
    let mut best: (usize, f64) = (0, f64::INFINITY);
    let mut second: (usize, f64) = (0, f64::INFINITY);
    let mut prefix = 0.0;
    for k in 0..n {
        if k > 0 {
            prefix += sorted[k - 1];
        }
        let mean_k = (total + two_pi * k as f64) / n as f64;
        let sum_sq = total_sq + 4.0 * PI * prefix + 4.0 * PI * PI * k as f64;
        let objective = sum_sq - n as f64 * mean_k * mean_k;
        if objective < best.1 {
            second = best;
            best = (k, objective);
        } else if objective < second.1 {
            second = (k, objective);
        }
    }

    let mean_of = |k: usize| wrap_angle((total + two_pi * k as f64) / n as f64);
    let mean = mean_of(best.0);
    if n > 1 && (second.1 - best.1).abs() < MEAN_TIE_TOL {
        let other = mean_of(second.0);
        // Duplicate branches landing on the same wrapped angle are not a tie.
        if wrap_angle(other - mean).abs() > 1e-9 {
            return Err(Error::NonUniqueMean {
                first: mean,
                second: other,
                tol: MEAN_TIE_TOL,
            });
        }
    }

    let deviations = angles.iter().map(|&t| wrap_angle(t - mean)).collect();
    Ok((mean, deviations))
}
