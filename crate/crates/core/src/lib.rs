//! Adaptive-computation single-stream visual tracker.
//!
//! Search and template crops are cut into initial and half-offset overlapped
//! patches, the static and dynamic templates are fused by bidirectional
//! cross-attention, and a transformer encoder whose layers after the first are
//! executed only when a learned gate fires processes the joint token sequence.
//! A centre head decodes the target box from the search tokens.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the concrete instantiations used by the CLI and the test suites.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dfa;
pub mod dfb;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod patching;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Tracker32 = tracker::Tracker<f32>;
pub type Tracker64 = tracker::Tracker<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
