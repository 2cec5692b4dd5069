//! Second-stage refinement machinery for LiDAR 3D detection: multi-stride
//! voxel pyramids, per-level grid-point pooling, cross-scale fusion graphs
//! with 3NN resampling, density-aware confidence scoring, two-stage losses
//! and AP/APH evaluation.
//!
//! Numeric code is generic over [`Real`]; the aliases at the crate root fix
//! the scalar to `f64`, which the training and gradient-check paths use.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pool;
pub mod scalar;
pub mod selftest;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Box3 = model::Box3D<f64>;
pub type Cloud = model::PointCloud<f64>;
pub type Scene = model::LabeledScene<f64>;
pub type Det = model::Detection<f64>;
pub type Mat = nn::Matrix<f64>;
pub type Pyramid = encoder::FeaturePyramid<f64>;
pub type Graph = fuse::FusionGraph;
pub type FuseParams = fuse::FusionParams<f64>;

pub type Heads = heads::HeadParams<f64>;
