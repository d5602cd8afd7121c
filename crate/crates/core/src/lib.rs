//! Joint N:M semi-structured sparsity and symmetric integer quantization for
//! small transformer encoders.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); weights are
//! stored as [`WeightMatrix`] (`Matrix<f32>`) and the `f64` instantiation is
//! used for gradient checks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admm;
pub mod codec;
pub mod config;
pub mod error;
pub mod matrix;
pub mod microformer;
pub mod project;
pub mod quantize;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod selftest;
pub mod sparsify;
pub mod ste;

pub use admm::{run_admm, AdmmLayerState, AdmmOptions, AdmmOutcome, AdmmSchedule, QuantMethod};
pub use config::RunConfig;
pub use error::{Error, FormatError, Result};
pub use matrix::Matrix;
pub use project::{
    euclidean_project, satisfies, ConstraintSet, Projection, QuantConstraint, Violation,
};
pub use quantize::{QuantSpec, QuantizedGroup, QuantizedMatrix, ScaleSolver};
pub use rng::Rng;
pub use scalar::Scalar;
pub use search::{CostMode, EncoderConfig, EncoderShape, LayerScheme, ScoredConfig, SearchParams};
pub use sparsify::{apply_mask, nxm_project, NxMMask, NxMPattern};

/// The storage type of every weight.
pub type WeightMatrix = Matrix<f32>;
/// Double-precision matrices used by reference and gradient-check paths.
pub type Matrix64 = Matrix<f64>;
