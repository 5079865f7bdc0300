//! Tangent-space principal component analysis of Procrustes-aligned shapes.
//!
//! The aligned fits are projected into the Procrustes tangent space at the
//! mean; PCA of the vectorized tangent coordinates yields horizontal
//! eigenvector matrices V_j and per-observation scores.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::procrustes::{inner_product, tangent_project, GpaResult, PreShape};

/// Relative eigenvalue threshold for retaining components.
const RANK_TOL: f64 = 1e-12;

/// Fitted shape PCA model.
#[derive(Debug, Clone)]
pub struct ShapePcaModel {
    /// Procrustes mean X̄.
    pub mean: PreShape,
    /// Retained eigenvector matrices V_j, orthonormal and horizontal.
    pub eigenvectors: Vec<DMatrix<f64>>,
    /// All eigenvalues, descending, clamped at 0.
    pub eigenvalues: Vec<f64>,
    /// Scores λ̃_ij = ⟨T_i, V_j⟩ against the uncentered tangent coordinates
    /// (n × retained).
    pub scores: DMatrix<f64>,
    /// Scores of the centered tangent coordinates ⟨T_i − T̄, V_j⟩.
    pub centered_scores: DMatrix<f64>,
    /// Per-observation tangent norms ‖T_i‖.
    pub tangent_norms: Vec<f64>,
    /// Per-observation fit distances ρ(X̄, S_i).
    pub fit_distances: Vec<f64>,
    /// Mean tangent coordinate T̄.
    pub tangent_mean: DMatrix<f64>,
    /// Number of retained components q.
    pub retained: usize,
}

impl ShapePcaModel {
    pub fn observations(&self) -> usize {
        self.scores.nrows()
    }
}

/// Fit shape PCA to the tangent coordinates of a GPA result.
///
/// The covariance of the vectorized centered tangent coordinates uses
/// divisor n. When the vectorized dimension exceeds n, the eigenproblem is
/// solved on the n×n Gram matrix instead; the spectra agree.
pub fn fit_shape_pca(gpa: &GpaResult) -> Result<ShapePcaModel> {
    let n = gpa.fits.len();
    if n < 2 {
        return Err(Error::Underdetermined { needed: 2, got: n });
    }
    let mean = gpa.mean.clone();
    let tangents: Vec<DMatrix<f64>> = gpa
        .fits
        .par_iter()
        .map(|f| tangent_project(&f.fitted, &mean))
        .collect::<Result<Vec<_>>>()?;

    let rows = mean.matrix().nrows();
    let cols = mean.matrix().ncols();
    let dim = rows * cols;

    let mut tangent_mean = DMatrix::zeros(rows, cols);
    for t in &tangents {
        tangent_mean += t;
    }
    tangent_mean /= n as f64;

    // Column-stacked centered coordinates, one column per observation.
    let mut centered = DMatrix::zeros(dim, n);
    for (i, t) in tangents.iter().enumerate() {
        let d = t - &tangent_mean;
        for c in 0..cols {
            for r in 0..rows {
                centered[(c * rows + r, i)] = d[(r, c)];
            }
        }
    }

    let total_variance = centered.norm_squared() / n as f64;
    if total_variance < 1e-28 {
        return Err(Error::DegenerateVariance(
            "all tangent coordinates are identical".into(),
        ));
    }

    let (eigenvalues, vectors) = if dim <= n {
        let cov = &centered * centered.transpose() / n as f64;
        symmetric_eigen_desc(&cov)
    } else {
        // Gram-side eigenproblem: same nonzero spectrum, eigenvectors
        // recovered as normalized images of the data matrix.
        let gram = centered.transpose() * &centered / n as f64;
        let (vals, u) = symmetric_eigen_desc(&gram);
        let mut vecs = DMatrix::zeros(dim, vals.len());
        for j in 0..vals.len() {
            let img = &centered * u.column(j);
            let norm = img.norm();
            if norm > 1e-150 {
                vecs.set_column(j, &(img / norm));
            }
        }
        (vals, vecs)
    };

    let eigenvalues: Vec<f64> = eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let max_val = eigenvalues.first().copied().unwrap_or(0.0);
    let retained = eigenvalues
        .iter()
        .filter(|&&v| v > RANK_TOL * max_val)
        .count();

    let eigenvectors: Vec<DMatrix<f64>> = (0..retained)
        .map(|j| unvec(&vectors.column(j).into_owned(), rows, cols))
        .collect();

    let mut scores = DMatrix::zeros(n, retained);
    let mut centered_scores = DMatrix::zeros(n, retained);
    for (i, t) in tangents.iter().enumerate() {
        let d = t - &tangent_mean;
        for (j, v) in eigenvectors.iter().enumerate() {
            scores[(i, j)] = inner_product(t, v);
            centered_scores[(i, j)] = inner_product(&d, v);
        }
    }

    let tangent_norms = tangents.iter().map(|t| t.norm()).collect();
    let fit_distances = gpa.fits.iter().map(|f| f.distance).collect();

    Ok(ShapePcaModel {
        mean,
        eigenvectors,
        eigenvalues,
        scores,
        centered_scores,
        tangent_norms,
        fit_distances,
        tangent_mean,
        retained,
    })
}

/// Eigendecomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue.
fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Inverse of column-stacking: rebuild a rows×cols matrix.
fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| v[c * rows + r])
}

/// Cumulative percentages of variance explained; the last entry is 100.
pub fn cumulative_variance(model: &ShapePcaModel) -> Vec<f64> {
    let total: f64 = model.eigenvalues.iter().sum();
    let mut acc = 0.0;
    model
        .eigenvalues
        .iter()
        .map(|&v| {
            acc += v;
            100.0 * acc / total
        })
        .collect()
}

/// Per-component percentages of variance explained.
pub fn variance_percentages(model: &ShapePcaModel) -> Vec<f64> {
    let total: f64 = model.eigenvalues.iter().sum();
    model
        .eigenvalues
        .iter()
        .map(|&v| 100.0 * v / total)
        .collect()
}
