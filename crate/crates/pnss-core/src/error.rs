//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("points are antipodal within {0:e} rad; direction is undefined")]
    Antipodal(f64),

    #[error("projection undefined: point lies at the subsphere axis or its antipode")]
    ProjectionUndefined,

    #[error(
        "circular Fréchet mean is not unique: candidates {first} and {second} \
         tie within {tol:e}"
    )]
    NonUniqueMean { first: f64, second: f64, tol: f64 },

    #[error("degenerate configuration: centered size {size:e} below 1e-12")]
    DegenerateConfig { size: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("generalized Procrustes analysis did not converge after {iterations} iterations")]
    GpaConvergence {
        iterations: usize,
        /// Mean pre-shape matrix at the last iterate.
        last_mean: Box<nalgebra::DMatrix<f64>>,
    },

    #[error(
        "pre-shape is not Procrustes-aligned to the mean: asymmetry {asymmetry:e} \
         exceeds {tol:e}"
    )]
    NotProcrustesAligned { asymmetry: f64, tol: f64 },

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("underdetermined fit: {needed} observations needed, {got} given")]
    Underdetermined { needed: usize, got: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("no unique equilibrium distribution: {0}")]
    NoUniqueEquilibrium(String),

    #[error("ingest failed:\n{0}")]
    Ingest(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}
