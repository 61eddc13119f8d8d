//! 4D Gaussian scenes with decomposed (image-plane plus depth) velocities,
//! view-dependent SH opacity, a deterministic differentiable CPU rasterizer,
//! closed-form Sim(3) pose alignment, the training objectives as metrics, and
//! a chunked evaluation protocol.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the double-precision types used by the CLI and file formats.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod motion;
pub mod optimize;
pub mod pipeline;
pub mod protocol;
pub mod rasterizer;
pub mod scalar;
pub mod sh;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Camera = geometry::CameraModel<f64>;
pub type Pose = geometry::Pose<f64>;
pub type DepthMap = geometry::DepthMap<f64>;
pub type PointMap = geometry::PointMap<f64>;
pub type Gaussian = gaussians::Gaussian4D<f64>;
pub type Scene = gaussians::Scene4D<f64>;
pub type MotionField = motion::MotionField<f64>;
pub type FlowField = motion::FlowField<f64>;
pub type Sim3 = alignment::Sim3<f64>;
pub type Image = image::Image<f64>;
pub type RenderedFrame = rasterizer::RenderedFrame<f64>;

pub type Camera32 = geometry::CameraModel<f32>;
pub type Gaussian32 = gaussians::Gaussian4D<f32>;
pub type Scene32 = gaussians::Scene4D<f32>;
pub type Sim3f32 = alignment::Sim3<f32>;
