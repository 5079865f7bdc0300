//! Principal nested shape space (PNSS) analysis for landmark configuration
//! trajectories.
//!
//! The crate provides the full analysis chain for molecular-dynamics-style
//! landmark data:
//!
//! * [`sphere`] — unit-sphere geometry: distances, exp/log maps, subsphere
//!   projection, circular Fréchet means.
//! * [`procrustes`] — pre-shapes, ordinary and generalized Procrustes
//!   analysis, tangent projections and the vertical tangent basis.
//! * [`pca`] — tangent-space shape PCA.
//! * [`pns`] — principal nested spheres: backward subsphere fitting, scores,
//!   projection of new points and inverse reconstruction.
//! * [`pnss`] — principal nested shape spaces through the PC-score sphere
//!   embedding, principal arcs and the PNSS mean shape.
//! * [`cluster`] — Ward hierarchical clustering on distance matrices.
//! * [`markov`] — transition matrices, Hellinger distances, equilibrium
//!   distributions and temporal clustering of runs.
//! * [`synth`] — deterministic synthetic trajectory generators.
//! * [`io`] — trajectory file format, CSV emission and model JSON.
//! * [`pipeline`] — configuration and end-to-end orchestration.

pub mod cluster;
pub mod error;
pub mod io;
pub mod markov;
pub mod pca;
pub mod pipeline;
pub mod pns;
pub mod pnss;
pub mod procrustes;
pub mod sphere;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use pca::ShapePcaModel;
pub use pipeline::{PipelineConfig, TrajectoryDataset};
pub use pns::PnsModel;
pub use pnss::PnssModel;
pub use procrustes::{Configuration, GpaResult, PreShape};
pub use sphere::{SpherePoint, Subsphere, TangentVector};
