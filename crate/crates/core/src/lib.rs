//! Geometry of 2-D latent spaces: distortion measures on a grid, a
//! density-equalizing transform that removes the distortion, and the paths,
//! distances, statistics and renderings built on top of it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64`/`*32` aliases below name the concrete instantiations.

pub mod cartogram;
pub mod error;
pub mod eval;
pub mod field;
pub mod fixtures;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod measures;
pub mod render;
pub mod scalar;
mod spatial;

pub use cartogram::{
    cell_density_after, solve_transform, DiffusionParams, SolverDiagnostics, TransformField,
};
pub use error::{Error, Result};
pub use field::{aggregate_samples_to_grid, AggregatedField, EmbeddingSet, MeaningField, MeasureField};
pub use grid::{bilinear_sample, GridField, GridSpec};
pub use measures::{
    finite_diff_jacobian, gaussian_blur, heuristic_measure, jsd_distance, relax_to_mean, riemannian_measure,
    DissimilarityKind, JacobianAtCell,
};
pub use scalar::{Point, Scalar};

pub type GridSpec64 = GridSpec<f64>;
pub type GridSpec32 = GridSpec<f32>;
pub type MeaningField64 = MeaningField<f64>;
pub type MeaningField32 = MeaningField<f32>;
pub type MeasureField64 = MeasureField<f64>;
pub type MeasureField32 = MeasureField<f32>;
pub type TransformField64 = TransformField<f64>;
pub type TransformField32 = TransformField<f32>;
pub type EmbeddingSet64 = EmbeddingSet<f64>;
pub type EmbeddingSet32 = EmbeddingSet<f32>;
