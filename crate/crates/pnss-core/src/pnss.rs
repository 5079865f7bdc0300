//! Principal nested shape spaces through the PC-score sphere embedding.
//!
//! Procrustes fits are mapped onto the p-dimensional unit sphere spanned by
//! the mean shape and the first p horizontal eigenvectors; principal nested
//! spheres run there, and scores, arcs and the PNSS mean map back to
//! landmark configurations. An exact variant that skips the PC truncation is
//! provided for small instances as a cross-check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pca::{cumulative_variance, fit_shape_pca, ShapePcaModel};
use crate::pns::{pns_decompose, pns_reconstruct, PnsModel};
use crate::procrustes::{gpa, Configuration, GpaResult, PreShape};
use crate::sphere::SpherePoint;

/// Tangent norms below this are treated as exactly at the mean.
const ZERO_TANGENT_TOL: f64 = 1e-14;

/// Summary diagnostics of the alignment step, kept for reporting.
#[derive(Debug, Clone)]
pub struct GpaDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub observations: usize,
    pub nonunique_fits: usize,
}

/// A fitted principal nested shape space model.
#[derive(Debug, Clone)]
pub struct PnssModel {
    /// The underlying shape PCA model (mean, eigenvectors, scores).
    pub pca: ShapePcaModel,
    /// Number of retained PC directions defining the embedding sphere S^p.
    pub p: usize,
    /// The embedded observations on S^p.
    pub embedded: Vec<SpherePoint>,
    /// Principal nested spheres decomposition of the embedded points.
    pub pns: PnsModel,
    /// Circular range bound of PNSS component 1: π × final scale. Scores of
    /// component 1 at ±cut_point describe the same shape.
    pub cut_point: f64,
    /// Alignment diagnostics.
    pub gpa_info: GpaDiagnostics,
}

impl PnssModel {
    /// PNSS scores: p×n, row 0 is the circular component 1.
    pub fn scores(&self) -> &DMatrix<f64> {
        &self.pns.coordinates
    }

    pub fn landmarks(&self) -> usize {
        self.pca.mean.landmarks()
    }

    pub fn ambient_dim(&self) -> usize {
        self.pca.mean.ambient_dim()
    }
}

/// A principal arc: configurations swept along one PNSS coordinate.
#[derive(Debug, Clone)]
pub struct PrincipalArc {
    /// 1-based component index.
    pub component: usize,
    /// Multiplier c of the interval ±c·s_j.
    pub c: f64,
    /// Standard deviation of the component's scores.
    pub s_j: f64,
    /// Sampled configurations from −c·s_j to +c·s_j; the midpoint is the
    /// PNSS mean shape.
    pub configurations: Vec<Configuration>,
}

/// Dimension bound for the embedding: p must satisfy
/// p < m(k−1) − m(m−1)/2 − 1, the dimension of the great sphere of
/// Procrustes fits.
pub fn embedding_dimension_bound(k: usize, m: usize) -> usize {
    m * (k - 1) - m * (m - 1) / 2 - 1
}

/// Map each Procrustes fit onto S^p in the basis (X̄, V_1, …, V_p):
/// λ_ij = (ρ_i/‖T_i‖)·λ̃_ij and the point is
/// (cos‖U_i‖, sin‖U_i‖/‖U_i‖·λ_i1, …). Fits at the mean map to the pole
/// (1, 0, …, 0).
pub fn embed_on_sphere(
    fits: &GpaResult,
    pca: &ShapePcaModel,
    p: usize,
) -> Result<Vec<SpherePoint>> {
    let n = fits.fits.len();
    if n != pca.observations() {
        return Err(Error::Dimension(format!(
            "GPA has {n} fits but the PCA model was built from {}",
            pca.observations()
        )));
    }
    let k = pca.mean.landmarks();
    let m = pca.mean.ambient_dim();
    let bound = embedding_dimension_bound(k, m);
    if p < 2 || p >= bound {
        return Err(Error::Range(format!(
            "p = {p} outside [2, {bound}) — the bound is m(k−1) − m(m−1)/2 − 1 = {bound}"
        )));
    }
    if p > pca.retained {
        return Err(Error::Rank(format!(
            "p = {p} exceeds the {} retained components with positive eigenvalues",
            pca.retained
        )));
    }

    (0..n)
        .into_par_iter()
        .map(|i| {
            let rho = fits.fits[i].distance;
            let t_norm = pca.tangent_norms[i];
            let lambda: Vec<f64> = if t_norm < ZERO_TANGENT_TOL {
                vec![0.0; p]
            } else {
                (0..p)
                    .map(|j| (rho / t_norm) * pca.scores[(i, j)])
                    .collect()
            };
            embed_lambda(&lambda)
        })
        .collect()
}

/// The (p+1)-coordinate sphere representation of tangent coordinates λ.
pub(crate) fn embed_lambda(lambda: &[f64]) -> Result<SpherePoint> {
    let p = lambda.len();
    let u_norm = lambda.iter().map(|l| l * l).sum::<f64>().sqrt();
    let mut coords = DVector::zeros(p + 1);
    if u_norm < ZERO_TANGENT_TOL {
        coords[0] = 1.0;
        return SpherePoint::new(coords);
    }
    coords[0] = u_norm.cos();
    let factor = u_norm.sin() / u_norm;
    for (j, l) in lambda.iter().enumerate() {
        coords[j + 1] = factor * l;
    }
    SpherePoint::from_unnormalized(coords)
}

/// Invert the embedding: PC scores (s/sin s)·(G_2, …, G_{p+1}) of a point
/// on the embedding sphere, with s = arccos(G_1) and the limit 1 at s = 0.
pub fn sphere_to_pc_scores(g: &SpherePoint) -> Result<DVector<f64>> {
    let g1 = g.coords()[0];
    if g1 <= -1.0 + 1e-9 {
        return Err(Error::Antipodal(1e-9));
    }
    let s = g1.clamp(-1.0, 1.0).acos();
    let factor = if s < 1e-9 { 1.0 } else { s / s.sin() };
    let p = g.dim();
    Ok(DVector::from_fn(p, |j, _| factor * g.coords()[j + 1]))
}

/// Smallest p whose cumulative explained variance reaches `threshold`
/// (a fraction in (0, 1]), clamped into the valid embedding range.
pub fn choose_component_count(pca: &ShapePcaModel, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "variance threshold {threshold} outside (0, 1]"
        )));
    }
    let cum = cumulative_variance(pca);
    let mut p = cum
        .iter()
        .position(|&c| c >= threshold * 100.0)
        .map(|i| i + 1)
        .unwrap_or(pca.retained);
    let bound = embedding_dimension_bound(pca.mean.landmarks(), pca.mean.ambient_dim());
    p = p.max(2).min(pca.retained);
    if bound > 2 {
        p = p.min(bound - 1);
    }
    if p < 2 || p > pca.retained {
        return Err(Error::Rank(format!(
            "cannot choose a valid component count: retained = {}, bound = {bound}",
            pca.retained
        )));
    }
    Ok(p)
}

/// Fit a PNSS model: GPA → shape PCA → sphere embedding → PNS.
///
/// ```
/// use pnss_core::pnss::{fit_pnss_auto, pnss_mean_shape};
/// use pnss_core::synth::articulated_rod_dataset;
///
/// let configs = articulated_rod_dataset(60, 1.0, 0.01, 7)?;
/// let model = fit_pnss_auto(&configs, 0.9)?;
/// assert!(model.p >= 2);
/// let mean = pnss_mean_shape(&model)?;
/// assert_eq!(mean.landmarks(), 6);
/// # Ok::<(), pnss_core::Error>(())
/// ```
pub fn fit_pnss(configs: &[Configuration], p: usize) -> Result<PnssModel> {
    let gpa_result = gpa(configs)?;
    fit_pnss_from_gpa(gpa_result, p)
}

/// Fit with p chosen by the cumulative-variance rule.
pub fn fit_pnss_auto(configs: &[Configuration], variance_threshold: f64) -> Result<PnssModel> {
    let gpa_result = gpa(configs)?;
    let pca = fit_shape_pca(&gpa_result)?;
    let p = choose_component_count(&pca, variance_threshold)?;
    fit_pnss_with_parts(gpa_result, pca, p)
}

/// Fit from an existing GPA result.
pub fn fit_pnss_from_gpa(gpa_result: GpaResult, p: usize) -> Result<PnssModel> {
    let pca = fit_shape_pca(&gpa_result)?;
    fit_pnss_with_parts(gpa_result, pca, p)
}

fn fit_pnss_with_parts(gpa_result: GpaResult, pca: ShapePcaModel, p: usize) -> Result<PnssModel> {
    let n = gpa_result.fits.len();
    if n < p + 2 {
        return Err(Error::Underdetermined {
            needed: p + 2,
            got: n,
        });
    }
    let embedded = embed_on_sphere(&gpa_result, &pca, p)?;
    let pns = pns_decompose(&embedded)?;
    let cut_point = std::f64::consts::PI * pns.final_scale;
    Ok(PnssModel {
        gpa_info: GpaDiagnostics {
            iterations: gpa_result.iterations,
            objective: gpa_result.objective,
            observations: n,
            nonunique_fits: gpa_result.nonunique_fits(),
        },
        pca,
        p,
        embedded,
        pns,
        cut_point,
    })
}

/// Map a point on the embedding sphere back to a pre-shape:
/// scores → U = Σ λ_j V_j → exponential map at X̄.
pub fn sphere_to_preshape(pca: &ShapePcaModel, g: &SpherePoint) -> Result<PreShape> {
    let p = g.dim();
    if p > pca.retained {
        return Err(Error::Dimension(format!(
            "point on S^{p} but only {} eigenvectors retained",
            pca.retained
        )));
    }
    let lambda = sphere_to_pc_scores(g)?;
    let rows = pca.mean.matrix().nrows();
    let cols = pca.mean.matrix().ncols();
    let mut u = DMatrix::zeros(rows, cols);
    for j in 0..p {
        u += &pca.eigenvectors[j] * lambda[j];
    }
    let u_norm = u.norm();
    if u_norm < ZERO_TANGENT_TOL {
        return Ok(pca.mean.clone());
    }
    let preshape = pca.mean.matrix() * u_norm.cos() + (u / u_norm) * u_norm.sin();
    PreShape::from_unnormalized(preshape)
}

/// The PNSS mean shape: the dimension-0 endpoint of the nested sequence,
/// reconstructed to a centered unit-size configuration.
pub fn pnss_mean_shape(model: &PnssModel) -> Result<Configuration> {
    let zero = DVector::zeros(model.p);
    let g = pns_reconstruct(&model.pns, &zero)?;
    let preshape = sphere_to_preshape(&model.pca, &g)?;
    Ok(preshape.to_configuration())
}

/// Sweep PNSS component `j` (1-based) over μ̂ ± c·s_j and reconstruct each
/// sample to a configuration. `samples` must be odd and ≥ 3 so that the
/// midpoint is the PNSS mean.
pub fn principal_arc(
    model: &PnssModel,
    j: usize,
    c: f64,
    samples: usize,
) -> Result<PrincipalArc> {
    if j < 1 || j > model.p {
        return Err(Error::Range(format!(
            "component {j} outside 1..={}",
            model.p
        )));
    }
    if samples < 3 || samples.is_multiple_of(2) {
        return Err(Error::Range(format!(
            "arc sample count {samples} must be odd and ≥ 3"
        )));
    }
    let row = model.pns.coordinates.row(j - 1);
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let s_j = (row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if j == 1 && c.abs() * s_j >= model.cut_point {
        return Err(Error::Range(format!(
            "arc extent c·s_1 = {} reaches the circular cut point {}",
            c.abs() * s_j,
            model.cut_point
        )));
    }

    let configurations: Vec<Configuration> = (0..samples)
        .into_par_iter()
        .map(|idx| {
            let t = idx as f64 / (samples - 1) as f64;
            let offset = -c * s_j + 2.0 * c * s_j * t;
            let mut coords = DVector::zeros(model.p);
            coords[j - 1] = offset;
            let g = pns_reconstruct(&model.pns, &coords)?;
            let preshape = sphere_to_preshape(&model.pca, &g)?;
            Ok(preshape.to_configuration())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PrincipalArc {
        component: j,
        c,
        s_j,
        configurations,
    })
}

/// Exact PNSS for small instances: fits are expressed in an orthonormal
/// basis of span(X̄) ⊕ H_X̄ — the full great sphere of Procrustes fits —
/// with no PC truncation. Exposed for k ≤ 8 as a cross-check of the
/// PC-score approximation.
#[derive(Debug, Clone)]
pub struct ExactPnssModel {
    pub mean: PreShape,
    /// Orthonormal basis of the horizontal space, as (k−1)×m matrices.
    pub basis: Vec<DMatrix<f64>>,
    /// Exact coordinates of the fits on the great sphere.
    pub embedded: Vec<SpherePoint>,
    pub pns: PnsModel,
}

pub fn fit_pnss_exact(configs: &[Configuration]) -> Result<ExactPnssModel> {
    let k = configs
        .first()
        .ok_or(Error::Underdetermined { needed: 4, got: 0 })?
        .landmarks();
    if k > 8 {
        return Err(Error::Range(format!(
            "exact PNSS is limited to k ≤ 8 landmarks (got {k}); use the PC-score embedding"
        )));
    }
    let gpa_result = gpa(configs)?;
    let mean = gpa_result.mean.clone();
    let m = mean.ambient_dim();
    let rows = k - 1;
    let dim_full = rows * m;

    // Orthonormal columns spanning X̄ and the vertical directions.
    let vertical = crate::procrustes::vertical_basis(&mean)?;
    let mut blocked: Vec<DVector<f64>> = Vec::with_capacity(1 + vertical.len());
    blocked.push(vec_matrix(mean.matrix()));
    for v in &vertical {
        let mut col = vec_matrix(v.matrix());
        for b in &blocked {
            let alpha = col.dot(b);
            col -= b * alpha;
        }
        let norm = col.norm();
        if norm < 1e-12 {
            return Err(Error::Rank(
                "vertical basis is numerically degenerate".into(),
            ));
        }
        blocked.push(col / norm);
    }

    // Complete to a basis of the horizontal complement by Gram–Schmidt over
    // the coordinate directions.
    let wanted = dim_full - blocked.len();
    let mut basis_vecs: Vec<DVector<f64>> = Vec::with_capacity(wanted);
    for c in 0..dim_full {
        if basis_vecs.len() == wanted {
            break;
        }
        let mut col = DVector::zeros(dim_full);
        col[c] = 1.0;
        for b in blocked.iter().chain(basis_vecs.iter()) {
            let alpha = col.dot(b);
            col -= b * alpha;
        }
        let norm = col.norm();
        if norm > 1e-8 {
            basis_vecs.push(col / norm);
        }
    }
    if basis_vecs.len() != wanted {
        return Err(Error::Rank(format!(
            "horizontal basis incomplete: {} of {wanted} directions found",
            basis_vecs.len()
        )));
    }

    let embedded: Vec<SpherePoint> = gpa_result
        .fits
        .iter()
        .map(|f| {
            let s = vec_matrix(f.fitted.matrix());
            let mut coords = DVector::zeros(wanted + 1);
            coords[0] = s.dot(&blocked[0]);
            for (i, b) in basis_vecs.iter().enumerate() {
                coords[i + 1] = s.dot(b);
            }
            SpherePoint::from_unnormalized(coords)
        })
        .collect::<Result<Vec<_>>>()?;

    let pns = pns_decompose(&embedded)?;
    let basis = basis_vecs
        .iter()
        .map(|v| unvec_matrix(v, rows, m))
        .collect();
    Ok(ExactPnssModel {
        mean,
        basis,
        embedded,
        pns,
    })
}

/// PNSS mean shape of the exact model.
pub fn exact_mean_shape(model: &ExactPnssModel) -> Result<Configuration> {
    let d = model.pns.dim();
    let g = pns_reconstruct(&model.pns, &DVector::zeros(d))?;
    let mut preshape = model.mean.matrix() * g.coords()[0];
    for (i, b) in model.basis.iter().enumerate() {
        preshape += b * g.coords()[i + 1];
    }
    Ok(PreShape::from_unnormalized(preshape)?.to_configuration())
}

fn vec_matrix(m: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |i, _| m[(i % rows, i / rows)])
}

fn unvec_matrix(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| v[c * rows + r])
}
