//! Principal nested spheres: backward dimension reduction on the unit
//! sphere.
//!
//! The best-fitting subsphere minimizes the sum of squared signed residuals
//! Σ (ρ(x_i, v) − r)². For a fixed axis the optimal radius is the mean
//! distance, so the optimization runs over the axis only, by
//! Levenberg–Marquardt in the tangent space of the current axis estimate.
//! Decomposition recurses S^d → S^(d−1) → … → S^1, finishing at the
//! circular Fréchet mean; the stacked signed residuals are the PNS
//! coordinates.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sphere::{
    frechet_mean_circle, log_map, project_to_subsphere, rotate_axis_to_pole, spherical_distance,
    wrap_angle, SpherePoint, Subsphere,
};

/// Levenberg damping start value.
const LM_DAMPING_INIT: f64 = 1e-3;
/// Step norm below which the axis iteration stops.
const LM_STEP_TOL: f64 = 1e-10;
/// Relative objective improvement below which the iteration stops. With
/// large residuals Gauss–Newton converges only linearly, so the step norm
/// can stay well above `LM_STEP_TOL` long after the objective has stopped
/// moving at double precision scale.
const LM_FTOL: f64 = 1e-9;
/// Iteration cap per start.
const LM_MAX_ITER: usize = 100;
/// Random restarts tried when no start converges.
const LM_RESTARTS: usize = 3;
/// Fixed seed for the restart generator; fits are deterministic.
const LM_RESTART_SEED: u64 = 0x504e_5331;
/// Floor for fitted radii, keeping them inside (0, π/2].
const RADIUS_FLOOR: f64 = 1e-9;

/// A fitted subsphere with its signed residuals.
#[derive(Debug, Clone)]
pub struct SubsphereFit {
    pub subsphere: Subsphere,
    /// Signed residuals ε_i = ρ(x_i, v̂) − r̂, in input order.
    pub residuals: Vec<f64>,
    /// Sum of squared residuals.
    pub objective: f64,
}

/// One level of a PNS decomposition.
#[derive(Debug, Clone)]
pub struct PnsLevel {
    /// Fitted axis v̂ on the sphere this level decomposes.
    pub axis: SpherePoint,
    /// Fitted radius r̂ ∈ (0, π/2].
    pub radius: f64,
    /// Rotation carrying the axis to the pole of its sphere.
    pub rotation_to_pole: DMatrix<f64>,
    /// Product of sin(r̂) over all previous levels; 1 for the first level.
    pub scale_in: f64,
    /// Signed residuals scaled by `scale_in`.
    pub residuals: Vec<f64>,
}

/// A complete principal nested spheres decomposition.
#[derive(Debug, Clone)]
pub struct PnsModel {
    /// Levels in fitting order, from the data sphere S^d down to S^1.
    pub levels: Vec<PnsLevel>,
    /// Circular Fréchet mean on the final S^1.
    pub final_mean_angle: f64,
    /// Product of sin(r̂) over all levels.
    pub final_scale: f64,
    /// PNS coordinates: d×n with row 0 = E(0) and row j = E(j).
    pub coordinates: DMatrix<f64>,
}

impl PnsModel {
    /// Dimension d of the sphere the model was fitted on.
    pub fn dim(&self) -> usize {
        self.coordinates.nrows()
    }

    pub fn observations(&self) -> usize {
        self.coordinates.ncols()
    }
}

/// Distances, mean radius and signed residuals for a candidate axis.
fn eval_axis(points: &[SpherePoint], axis: &DVector<f64>) -> (f64, Vec<f64>, f64) {
    let distances: Vec<f64> = points
        .iter()
        .map(|p| p.coords().dot(axis).clamp(-1.0, 1.0).acos())
        .collect();
    let radius = distances.iter().sum::<f64>() / distances.len() as f64;
    let residuals: Vec<f64> = distances.iter().map(|d| d - radius).collect();
    let objective = residuals.iter().map(|e| e * e).sum();
    (radius, residuals, objective)
}

/// One Levenberg–Marquardt run from a starting axis. Returns the final
/// axis, its objective, and whether a strict stopping criterion was met
/// before the iteration cap; `None` only on hard numerical failure.
fn lm_from(points: &[SpherePoint], start: &DVector<f64>) -> Option<(DVector<f64>, f64, bool)> {
    let dim = start.len() - 1;
    let n = points.len();
    let mut axis = start.normalize();
    let (_, mut residuals, mut objective) = eval_axis(points, &axis);
    let mut damping = LM_DAMPING_INIT;

    for _ in 0..LM_MAX_ITER {
        let axis_point = SpherePoint::from_unnormalized(axis.clone()).ok()?;
        let rot = rotate_axis_to_pole(&axis_point);
        // Tangent basis at the axis: the first `dim` rows of the rotation.
        let basis: Vec<DVector<f64>> = (0..dim)
            .map(|a| rot.row(a).transpose().clone_owned())
            .collect();

        // J[i][a] = ∂(ρ_i − ρ̄)/∂δ_a; the gradient of ρ(p, ·) at the axis is
        // −u with u the unit tangent toward p.
        let mut grad_rows = DMatrix::zeros(n, dim);
        for (i, p) in points.iter().enumerate() {
            let cos = p.coords().dot(&axis).clamp(-1.0, 1.0);
            let sin = (1.0 - cos * cos).sqrt();
            if sin < 1e-12 {
                continue;
            }
            let u = (p.coords() - &axis * cos) / sin;
            for (a, b) in basis.iter().enumerate() {
                grad_rows[(i, a)] = -u.dot(b);
            }
        }
        let mut jac = grad_rows.clone();
        for a in 0..dim {
            let col_mean = grad_rows.column(a).sum() / n as f64;
            for i in 0..n {
                jac[(i, a)] -= col_mean;
            }
        }

        let e = DVector::from_row_slice(&residuals);
        let jtj = jac.transpose() * &jac;
        let jte = jac.transpose() * &e;

        let mut accepted = false;
        for _ in 0..40 {
            let lhs = &jtj + DMatrix::identity(dim, dim) * damping;
            let step = match lhs.lu().solve(&(-&jte)) {
                Some(s) => s,
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let step_norm = step.norm();
            let mut trial = axis.clone() * step_norm.cos();
            if step_norm > 0.0 {
                let mut dir = DVector::zeros(dim + 1);
                for (a, b) in basis.iter().enumerate() {
                    dir += b * step[a];
                }
                trial += dir * (step_norm.sin() / step_norm);
            }
            trial = trial.normalize();
            let (_, trial_res, trial_obj) = eval_axis(points, &trial);
            if trial_obj < objective {
                let improvement = objective - trial_obj;
                let trusting = damping <= LM_DAMPING_INIT;
                axis = trial;
                residuals = trial_res;
                objective = trial_obj;
                damping = (damping / 10.0).max(1e-15);
                accepted = true;
                if step_norm < LM_STEP_TOL
                    || (trusting && improvement <= LM_FTOL * objective.max(1e-300))
                {
                    return Some((axis, objective, true));
                }
                break;
            }
            damping *= 10.0;
            if step_norm < LM_STEP_TOL {
                // Even undamped progress is below resolution: a minimum.
                return Some((axis, objective, true));
            }
        }
        if !accepted || objective < 1e-28 {
            return Some((axis, objective, true));
        }
    }
    // Iteration cap: the iterate is still a valid (if slowly improving)
    // local answer; the caller decides whether to restart.
    Some((axis, objective, false))
}

/// Axis candidates: the scatter eigenvector with smallest eigenvalue covers
/// the great-circle regime, the normalized Euclidean mean the concentrated
/// small-circle regime.
fn initial_axes(points: &[SpherePoint]) -> Vec<DVector<f64>> {
    let n = points.len();
    let len = points[0].coords().len();
    let mut starts = Vec::new();

    let mut scatter = DMatrix::zeros(len, len);
    for p in points {
        scatter += p.coords() * p.coords().transpose();
    }
    scatter /= n as f64;
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut min_idx = 0;
    for i in 1..len {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    starts.push(eig.eigenvectors.column(min_idx).normalize());

    let mut mean = DVector::zeros(len);
    for p in points {
        mean += p.coords();
    }
    if mean.norm() > 1e-9 {
        starts.push(mean.normalize());
    }
    starts
}

/// Fit the best subsphere to points on a common sphere S^i by minimizing
/// Σ (ρ(x_i, v) − r)² with the radius eliminated in closed form.
///
/// Requires at least i+2 points. The fitted radius is kept in (0, π/2] by
/// flipping the axis to its antipode when the unconstrained optimum exceeds
/// π/2 (which negates the residuals).
pub fn fit_subsphere(points: &[SpherePoint]) -> Result<SubsphereFit> {
    if points.is_empty() {
        return Err(Error::Underdetermined { needed: 3, got: 0 });
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::Dimension(format!(
                "points live on spheres of different dimension: {} vs {}",
                dim,
                p.dim()
            )));
        }
    }
    if points.len() < dim + 2 {
        return Err(Error::Underdetermined {
            needed: dim + 2,
            got: points.len(),
        });
    }

    let mut candidates: Vec<(DVector<f64>, f64, bool)> = initial_axes(points)
        .iter()
        .filter_map(|start| lm_from(points, start))
        .collect();
    // Seeded restarts when no start met a strict stopping criterion.
    if !candidates.iter().any(|(_, _, strict)| *strict) {
        let mut rng = ChaCha8Rng::seed_from_u64(LM_RESTART_SEED);
        for _ in 0..LM_RESTARTS {
            let start = DVector::from_fn(dim + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            if start.norm() < 1e-6 {
                continue;
            }
            if let Some(run) = lm_from(points, &start) {
                candidates.push(run);
            }
        }
    }
    // Keep the best objective; a capped iterate is an acceptable answer on
    // nearly flat objectives, where Gauss–Newton only converges linearly.
    let best = candidates
        .into_iter()
        .filter(|(_, obj, _)| obj.is_finite())
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (mut axis, _, _) = best.ok_or(Error::Convergence {
        what: "subsphere fit",
        iterations: LM_MAX_ITER * (2 + LM_RESTARTS),
    })?;

    let (mut radius, _, _) = eval_axis(points, &axis);
    if radius > FRAC_PI_2 {
        axis = -axis;
        radius = PI - radius;
    }
    let radius = radius.clamp(RADIUS_FLOOR, FRAC_PI_2);
    let residuals: Vec<f64> = points
        .iter()
        .map(|p| p.coords().dot(&axis).clamp(-1.0, 1.0).acos() - radius)
        .collect();
    let objective = residuals.iter().map(|e| e * e).sum();

    Ok(SubsphereFit {
        subsphere: Subsphere::new(SpherePoint::from_unnormalized(axis)?, radius)?,
        residuals,
        objective,
    })
}

/// Angle of a point on S^1.
fn circle_angle(p: &SpherePoint) -> f64 {
    p.coords()[1].atan2(p.coords()[0])
}

/// Decompose points on S^d into principal nested spheres.
///
/// Each level fits a subsphere, records the signed residuals scaled by the
/// running sin-radius product, projects the points onto the subsphere,
/// rotates its axis to the pole and drops the last coordinate to land on the
/// unit sphere one dimension lower. The final S^1 contributes the circular
/// Fréchet mean and the E(0) row.
pub fn pns_decompose(points: &[SpherePoint]) -> Result<PnsModel> {
    if points.len() < 4 {
        return Err(Error::Underdetermined {
            needed: 4,
            got: points.len(),
        });
    }
    let d = points[0].dim();
    for p in points {
        if p.dim() != d {
            return Err(Error::Dimension(format!(
                "points live on spheres of different dimension: {} vs {}",
                d,
                p.dim()
            )));
        }
    }
    let n = points.len();
    let mut current: Vec<SpherePoint> = points.to_vec();
    let mut levels = Vec::with_capacity(d.saturating_sub(1));
    let mut scale = 1.0;

    for cur_d in (2..=d).rev() {
        debug_assert_eq!(current[0].dim(), cur_d);
        let fit = fit_subsphere(&current)?;
        let rotation = rotate_axis_to_pole(fit.subsphere.axis());
        let sin_r = fit.subsphere.radius().sin();

        let next: Vec<SpherePoint> = current
            .par_iter()
            .map(|p| {
                let projected = project_to_subsphere(p, &fit.subsphere)?;
                let pole_coords = &rotation * projected.coords();
                let reduced = pole_coords.rows(0, cur_d).clone_owned() / sin_r;
                SpherePoint::from_unnormalized(reduced)
            })
            .collect::<Result<Vec<_>>>()?;

        levels.push(PnsLevel {
            axis: fit.subsphere.axis().clone(),
            radius: fit.subsphere.radius(),
            rotation_to_pole: rotation,
            scale_in: scale,
            residuals: fit.residuals.iter().map(|e| scale * e).collect(),
        });
        scale *= sin_r;
        current = next;
    }

    let angles: Vec<f64> = current.iter().map(circle_angle).collect();
    let (final_mean_angle, deviations) = frechet_mean_circle(&angles)?;

    let mut coordinates = DMatrix::zeros(d, n);
    for (i, dev) in deviations.iter().enumerate() {
        coordinates[(0, i)] = scale * dev;
    }
    for (l, level) in levels.iter().enumerate() {
        let row = d - 1 - l;
        for (i, r) in level.residuals.iter().enumerate() {
            coordinates[(row, i)] = *r;
        }
    }

    Ok(PnsModel {
        levels,
        final_mean_angle,
        final_scale: scale,
        coordinates,
    })
}

/// Percentage of total variance carried by each PNS coordinate row, in level
/// order (E(0) first as component 1). Not forced to be descending.
pub fn variance_by_component(model: &PnsModel) -> Result<Vec<f64>> {
    let total = model.coordinates.norm_squared();
    if total < 1e-28 {
        return Err(Error::DegenerateVariance(
            "all PNS coordinates are zero".into(),
        ));
    }
    Ok((0..model.coordinates.nrows())
        .map(|r| 100.0 * model.coordinates.row(r).norm_squared() / total)
        .collect())
}

/// PNS coordinates of a new point, obtained by replaying the fitted
/// decomposition chain.
pub fn pns_project(model: &PnsModel, point: &SpherePoint) -> Result<DVector<f64>> {
    let d = model.dim();
    if point.dim() != d {
        return Err(Error::Dimension(format!(
            "point on S^{} cannot be scored by a model on S^{}",
            point.dim(),
            d
        )));
    }
    let mut coords = DVector::zeros(d);
    let mut current = point.clone();
    for (l, level) in model.levels.iter().enumerate() {
        let cur_d = current.dim();
        let rho = spherical_distance(&current, &level.axis)?;
        coords[d - 1 - l] = level.scale_in * (rho - level.radius);
        let sub = Subsphere::new(level.axis.clone(), level.radius)?;
        let projected = project_to_subsphere(&current, &sub)?;
        let pole_coords = &level.rotation_to_pole * projected.coords();
        let reduced = pole_coords.rows(0, cur_d).clone_owned() / level.radius.sin();
        current = SpherePoint::from_unnormalized(reduced)?;
    }
    let angle = circle_angle(&current);
    coords[0] = model.final_scale * wrap_angle(angle - model.final_mean_angle);
    Ok(coords)
}

/// Invert the decomposition: place a point on the final circle at the E(0)
/// offset, then lift through each level onto A(v̂, r̂ + ε), undoing the
/// rotation and projection.
pub fn pns_reconstruct(model: &PnsModel, coords: &DVector<f64>) -> Result<SpherePoint> {
    let d = model.dim();
    if coords.len() != d {
        return Err(Error::Dimension(format!(
            "coordinate vector has length {}, model dimension is {}",
            coords.len(),
            d
        )));
    }
    if coords[0].abs() > PI * model.final_scale + 1e-12 {
        return Err(Error::Range(format!(
            "E(0) entry {} outside (−π·{s}, π·{s}]",
            coords[0],
            s = model.final_scale
        )));
    }
    let angle = model.final_mean_angle + coords[0] / model.final_scale;
    let mut current = DVector::from_row_slice(&[angle.cos(), angle.sin()]);

    for (l, level) in model.levels.iter().enumerate().rev() {
        let eps = coords[d - 1 - l] / level.scale_in;
        let rho = level.radius + eps;
        if !(0.0..=PI).contains(&rho) {
            return Err(Error::Range(format!(
                "coordinate {} lifts to distance {rho} outside [0, π]",
                d - 1 - l
            )));
        }
        let cur_len = current.len();
        let mut lifted = DVector::zeros(cur_len + 1);
        let sin_rho = rho.sin();
        for i in 0..cur_len {
            lifted[i] = sin_rho * current[i];
        }
        lifted[cur_len] = rho.cos();
        current = level.rotation_to_pole.transpose() * lifted;
        current = current.normalize();
    }
    SpherePoint::from_unnormalized(current)
}

/// Variance shares (percent, descending) of naive tangent-space PCA on
/// sphere data: log-map the points at their normalized Euclidean mean and
/// decompose the centered tangent covariance (divisor n).
pub fn tangent_pca_variance_shares(points: &[SpherePoint]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::Underdetermined {
            needed: 2,
            got: points.len(),
        });
    }
    let len = points[0].coords().len();
    let mut mean = DVector::zeros(len);
    for p in points {
        mean += p.coords();
    }
    if mean.norm() < 1e-9 {
        return Err(Error::DegenerateVariance(
            "extrinsic mean of the sphere data is at the origin".into(),
        ));
    }
    let base = SpherePoint::from_unnormalized(mean)?;
    let tangents: Vec<DVector<f64>> = points
        .iter()
        .map(|p| log_map(&base, p).map(|t| t.vec().clone()))
        .collect::<Result<Vec<_>>>()?;
    let n = tangents.len() as f64;
    let mut t_mean = DVector::zeros(len);
    for t in &tangents {
        t_mean += t;
    }
    t_mean /= n;
    let mut cov = DMatrix::zeros(len, len);
    for t in &tangents {
        let d = t - &t_mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = vals.iter().sum();
    if total < 1e-28 {
        return Err(Error::DegenerateVariance(
            "tangent coordinates carry no variance".into(),
        ));
    }
    Ok(vals.iter().map(|&v| 100.0 * v / total).collect())
}
