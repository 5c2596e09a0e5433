//! Instance-conditional CNN engine: gated residual blocks with per-block and
//! per-channel salience, structural skipping at inference, and an exact FLOPs
//! cost model.

pub mod analytics;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod gating;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
