//! Point-cloud shape completion.
//!
//! A per-point feature encoder (optionally with a multi-head self-attention
//! block) compresses a partial cloud into a latent vector; a decoder of K
//! independent surface generators maps seed points, concatenated with that
//! latent, onto 3-D patches whose union is the completed cloud. Training
//! minimizes Earth Mover's Distance; evaluation reports Chamfer Distance and
//! EMD.

pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Frame, Point3, PointCloud};
pub use metrics::{AssignmentPlan, MetricReport};
pub use tensor::{Graph, Tensor, Var};
