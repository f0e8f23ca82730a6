//! Hierarchical 3D descriptors for point clouds.
//!
//! A single forward pass over a raw point cloud yields per-point local
//! descriptors, a keypoint saliency map and a compact global descriptor for
//! retrieval. The crate also ships the training losses, a two-phase trainer,
//! RANSAC-based rigid registration and the evaluation metrics
//! (repeatability, RTE/RRE, recall@N).

pub mod cloud;
pub mod config;
pub mod detect_eval;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kdtree;
pub mod losses;
pub mod net;
pub mod optim;
pub mod registration;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use cloud::{PointCloud, RigidTransform};
pub use error::{Error, Result};
pub use scalar::Real;

/// Model with the training numeric policy (32-bit).
pub type ModelParams32 = net::ModelParams<f32>;
/// Model in 64-bit, used by the gradient-check suite.
pub type ModelParams64 = net::ModelParams<f64>;
