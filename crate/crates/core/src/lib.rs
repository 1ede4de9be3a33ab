//! Margin-based softmax losses, margin metrics and sphere-constrained
//! optimizers for studying hyperspherical prototype/feature geometry.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the experiment runner uses.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod margins;
pub mod matrix;
pub mod scalar;
pub mod sphere_opt;
pub mod trainer;

pub use datasets::{Blobs, ImbalanceSpec};
pub use error::{Error, Result};
pub use geometry::{DVector, FeatureMatrix, ProtoMatrix};
pub use losses::{LossKind, LossOutput, LossSpec, RegularizerSpec};
pub use margins::MarginReport;
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use sphere_opt::{OptimConfig, RieszConfig, RunHistory};
pub use trainer::{MlpSpec, RunRecord, TrainConfig};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type ProtoMatrix64 = ProtoMatrix<f64>;
pub type ProtoMatrix32 = ProtoMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type MarginReport64 = MarginReport<f64>;
pub type LossOutput64 = LossOutput<f64>;
pub type Blobs64 = Blobs<f64>;
