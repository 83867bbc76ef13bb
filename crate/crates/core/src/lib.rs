//! Synchronized multi-frame diffusion.
//!
//! Every frame of a clip runs its own diffusion sampling loop. After each
//! denoising step the predicted clean frames exchange content: each
//! prediction is warped to every other frame's pose, its occluded and
//! off-image parts are rebuilt by gradient-domain (Poisson) blending, and
//! the resulting candidates are either averaged (early, semantic steps) or
//! replaced by one randomly anchored frame's content (late, detail steps).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common concrete types.

pub mod bridge;
pub mod config;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod poisson;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use raster::{FlowField, Frame, OcclusionMask};
pub use scalar::Scalar;

pub type FrameF32 = Frame<f32>;
pub type FrameF64 = Frame<f64>;
pub type FlowF32 = FlowField<f32>;
pub type FlowF64 = FlowField<f64>;
