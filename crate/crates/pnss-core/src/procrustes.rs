//! Pre-shape construction, ordinary and generalized Procrustes analysis,
//! Procrustes tangent projection, Riemannian shape distance and the vertical
//! tangent basis of the pre-shape sphere.
//!
//! A configuration of k labelled landmarks in R^m is reduced to a pre-shape
//! (a unit-norm (k−1)×m matrix) by Helmert sub-matrix centering and scaling;
//! rotations are then quotiented out by Procrustes alignment.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on the unit Frobenius norm of a [`PreShape`].
pub const PRESHAPE_NORM_TOL: f64 = 1e-12;
/// Centered size below which a configuration is degenerate.
pub const DEGENERATE_SIZE_TOL: f64 = 1e-12;
/// Asymmetry tolerance for [`tangent_project`]'s alignment precondition.
pub const ALIGNMENT_TOL: f64 = 1e-8;
/// Sum of the two smallest signed singular values below which a Procrustes
/// fit is flagged as non-unique.
const UNIQUENESS_TOL: f64 = 1e-9;
/// Relative objective change at which GPA stops.
const GPA_TOL: f64 = 1e-10;
/// Iteration cap for GPA.
const GPA_MAX_ITER: usize = 200;

/// A raw k×m landmark configuration in source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    points: DMatrix<f64>,
}

impl Configuration {
    /// Requires k > m ≥ 2 and a nonzero centered size.
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        let (k, m) = points.shape();
        if m < 2 || k <= m {
            return Err(Error::Dimension(format!(
                "configuration must have k > m ≥ 2 landmarks, got k={k}, m={m}"
            )));
        }
        let size = centered_size(&points);
        if size < DEGENERATE_SIZE_TOL {
            return Err(Error::DegenerateConfig { size });
        }
        Ok(Self { points })
    }

    pub fn landmarks(&self) -> usize {
        self.points.nrows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }
}

/// Frobenius norm of the row-centered configuration.
fn centered_size(points: &DMatrix<f64>) -> f64 {
    let k = points.nrows();
    let mut centered = points.clone();
    for c in 0..points.ncols() {
        let mean = points.column(c).sum() / k as f64;
        for r in 0..k {
            centered[(r, c)] -= mean;
        }
    }
    centered.norm()
}

/// A (k−1)×m matrix of unit Frobenius norm: a point on the pre-shape sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct PreShape {
    matrix: DMatrix<f64>,
}

impl PreShape {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let norm = matrix.norm();
        if (norm - 1.0).abs() > PRESHAPE_NORM_TOL {
            return Err(Error::Range(format!(
                "pre-shape norm {norm} deviates from 1 by more than {PRESHAPE_NORM_TOL:e}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn from_unnormalized(matrix: DMatrix<f64>) -> Result<Self> {
        let norm = matrix.norm();
        if norm < DEGENERATE_SIZE_TOL {
            return Err(Error::DegenerateConfig { size: norm });
        }
        Ok(Self {
            matrix: matrix / norm,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Landmark count k of the underlying configuration.
    pub fn landmarks(&self) -> usize {
        self.matrix.nrows() + 1
    }

    pub fn ambient_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Invert the Helmert mapping: a centered k×m configuration of unit size.
    pub fn to_configuration(&self) -> Configuration {
        let h = helmert_submatrix(self.landmarks());
        Configuration::new(h.transpose() * &self.matrix)
            .expect("Helmert inverse of a pre-shape is a valid configuration")
    }
}

/// The (k−1)×k Helmert sub-matrix: orthonormal rows, each orthogonal to the
/// ones vector. Row j has j entries −1/√(j(j+1)) followed by j/√(j(j+1)).
pub fn helmert_submatrix(k: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(k - 1, k);
    for j in 1..k {
        let hj = -1.0 / ((j * (j + 1)) as f64).sqrt();
        for c in 0..j {
            h[(j - 1, c)] = hj;
        }
        h[(j - 1, j)] = -(j as f64) * hj;
    }
    h
}

/// Remove translation (Helmert sub-matrix) and scale (unit Frobenius norm).
pub fn to_preshape(c: &Configuration) -> Result<PreShape> {
    let h = helmert_submatrix(c.landmarks());
    let centered = h * c.points();
    let size = centered.norm();
    if size < DEGENERATE_SIZE_TOL {
        return Err(Error::DegenerateConfig { size });
    }
    PreShape::new(centered / size)
}

/// The result of ordinary Procrustes alignment of one pre-shape to another.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    /// The rotated pre-shape S_X = X·R.
    pub fitted: PreShape,
    /// The optimal rotation R ∈ SO(m).
    pub rotation: DMatrix<f64>,
    /// Riemannian shape distance ρ ∈ [0, π/2] to the reference.
    pub distance: f64,
    /// False when the optimal rotation is numerically non-unique.
    pub unique: bool,
}

/// SVD with singular values sorted descending and factors permuted to match.
fn sorted_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt_sorted = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    let s_sorted = DVector::from_fn(order.len(), |i, _| s[order[i]]);
    (u_sorted, s_sorted, vt_sorted)
}

/// Align `x` to `reference` over SO(m): maximizes tr(referenceᵀ·x·R).
///
/// Solved through the SVD of xᵀ·reference with the smallest singular value
/// sign-flipped when required to keep det(R) = +1 (reflections excluded).
pub fn opa_fit(x: &PreShape, reference: &PreShape) -> Result<ProcrustesFit> {
    if x.matrix().shape() != reference.matrix().shape() {
        return Err(Error::Dimension(format!(
            "pre-shape shapes differ: {:?} vs {:?}",
            x.matrix().shape(),
            reference.matrix().shape()
        )));
    }
    let m = x.ambient_dim();
    let a = x.matrix().transpose() * reference.matrix();
    let (u, s, vt) = sorted_svd(&a);
    let sign = (&u * &vt).determinant().signum();
    // R = U·diag(1,…,1,sign)·Vᵀ maximizes the trace over SO(m).
    let mut d = DMatrix::identity(m, m);
    d[(m - 1, m - 1)] = sign;
    let rotation = &u * d * &vt;

    let near_singular = s[m - 2] + sign * s[m - 1] < UNIQUENESS_TOL;
    let rank_deficient = preshape_rank(x) < m - 1;

    let fitted = PreShape::from_unnormalized(x.matrix() * &rotation)?;
    // arccos of the attained trace, evaluated in chord form
    // ρ = 2·arcsin(‖S − X̄‖/2), which stays accurate near ρ = 0.
    let chord = (fitted.matrix() - reference.matrix()).norm();
    let distance = 2.0 * (chord / 2.0).clamp(0.0, std::f64::consts::FRAC_1_SQRT_2).asin();
    Ok(ProcrustesFit {
        fitted,
        rotation,
        distance,
        unique: !(near_singular || rank_deficient),
    })
}

fn preshape_rank(x: &PreShape) -> usize {
    let svd = x.matrix().clone().svd(false, false);
    svd.singular_values.iter().filter(|&&s| s > 1e-10).count()
}

/// Output of generalized Procrustes analysis.
#[derive(Debug, Clone)]
pub struct GpaResult {
    /// The estimated mean pre-shape X̄.
    pub mean: PreShape,
    /// One Procrustes fit per input, aligned to `mean`, in input order.
    pub fits: Vec<ProcrustesFit>,
    /// Mean updates performed before convergence.
    pub iterations: usize,
    /// Final Procrustes sum of squares Σᵢ ‖Sᵢ − X̄‖².
    pub objective: f64,
    /// Objective recorded at each iteration (non-increasing).
    pub objective_history: Vec<f64>,
}

impl GpaResult {
    /// Number of fits flagged as numerically non-unique.
    pub fn nonunique_fits(&self) -> usize {
        self.fits.iter().filter(|f| !f.unique).count()
    }
}

/// Generalized Procrustes analysis: alternate between fitting every
/// pre-shape to the current mean and replacing the mean with the normalized
/// average of the fits, until the relative objective change drops below
/// 1e-10 (at most 200 iterations).
///
/// Per-configuration fits run in parallel; the averaging reduction is done
/// in fixed index order so results do not depend on the worker count.
pub fn gpa(configs: &[Configuration]) -> Result<GpaResult> {
    if configs.len() < 2 {
        return Err(Error::Underdetermined {
            needed: 2,
            got: configs.len(),
        });
    }
    let k = configs[0].landmarks();
    let m = configs[0].ambient_dim();
    for c in configs {
        if c.landmarks() != k || c.ambient_dim() != m {
            return Err(Error::Dimension(format!(
                "configurations disagree: expected {k}×{m}, got {}×{}",
                c.landmarks(),
                c.ambient_dim()
            )));
        }
    }
    let preshapes: Vec<PreShape> = configs
        .par_iter()
        .map(to_preshape)
        .collect::<Result<Vec<_>>>()?;

    let n = preshapes.len();
    let mut mean = preshapes[0].clone();
    let mut history = Vec::new();
    let mut prev_objective = f64::INFINITY;
    let mut iterations = 0;

    loop {
        let fits: Vec<ProcrustesFit> = preshapes
            .par_iter()
            .map(|x| opa_fit(x, &mean))
            .collect::<Result<Vec<_>>>()?;
        // ‖S − X̄‖² = 2 − 2cos ρ on the unit sphere.
        let objective: f64 = fits.iter().map(|f| 2.0 - 2.0 * f.distance.cos()).sum();
        history.push(objective);

        let converged = objective < 1e-30
            || (prev_objective.is_finite()
                && (prev_objective - objective).abs() <= GPA_TOL * prev_objective.max(1e-30));
        if converged {
            return Ok(GpaResult {
                mean,
                fits,
                iterations,
                objective,
                objective_history: history,
            });
        }
        if iterations >= GPA_MAX_ITER {
            return Err(Error::GpaConvergence {
                iterations,
                last_mean: Box::new(mean.matrix().clone()),
            });
        }
        prev_objective = objective;

        let mut avg = DMatrix::zeros(k - 1, m);
        for f in &fits {
            avg += f.fitted.matrix();
        }
        avg /= n as f64;
        mean = PreShape::from_unnormalized(avg)?;
        iterations += 1;
    }
}

/// Procrustes tangent projection T = S − ⟨X̄, S⟩·X̄ of a fit at the mean.
///
/// Requires the fit to be Procrustes-aligned: X̄ᵀ·S symmetric within 1e-8.
pub fn tangent_project(fit: &PreShape, mean: &PreShape) -> Result<DMatrix<f64>> {
    if fit.matrix().shape() != mean.matrix().shape() {
        return Err(Error::Dimension(format!(
            "pre-shape shapes differ: {:?} vs {:?}",
            fit.matrix().shape(),
            mean.matrix().shape()
        )));
    }
    let cross = mean.matrix().transpose() * fit.matrix();
    let asymmetry = (&cross - cross.transpose()).abs().max();
    if asymmetry > ALIGNMENT_TOL {
        return Err(Error::NotProcrustesAligned {
            asymmetry,
            tol: ALIGNMENT_TOL,
        });
    }
    let inner = inner_product(mean.matrix(), fit.matrix());
    Ok(fit.matrix() - mean.matrix() * inner)
}

/// Frobenius inner product ⟨A, B⟩ = tr(AᵀB).
pub fn inner_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.zip_fold(b, 0.0, |acc, x, y| acc + x * y)
}

/// Riemannian shape distance ρ ∈ [0, π/2] between two configurations,
/// invariant to similarity transforms of either argument.
pub fn riemannian_shape_distance(c1: &Configuration, c2: &Configuration) -> Result<f64> {
    let p1 = to_preshape(c1)?;
    let p2 = to_preshape(c2)?;
    Ok(opa_fit(&p1, &p2)?.distance)
}

/// The normalized vertical tangent basis {X₀·E_{j1,j2}/‖·‖ : j1 < j2} at a
/// full-rank pre-shape. These m(m−1)/2 unit matrices span the pure-rotation
/// directions; every Procrustes fit to X₀ is orthogonal to all of them.
pub fn vertical_basis(x0: &PreShape) -> Result<Vec<PreShape>> {
    let m = x0.ambient_dim();
    if preshape_rank(x0) < m {
        return Err(Error::Rank(format!(
            "vertical basis needs rank {m}, pre-shape has rank {}",
            preshape_rank(x0)
        )));
    }
    let mut basis = Vec::with_capacity(m * (m - 1) / 2);
    for j1 in 0..m {
        for j2 in (j1 + 1)..m {
            // X₀·E_{j1,j2} has column j1 = −X₀[:,j2], column j2 = X₀[:,j1].
            let mut b = DMatrix::zeros(x0.matrix().nrows(), m);
            b.set_column(j1, &(-x0.matrix().column(j2)));
            b.set_column(j2, &x0.matrix().column(j1));
            basis.push(PreShape::from_unnormalized(b)?);
        }
    }
    Ok(basis)
}
