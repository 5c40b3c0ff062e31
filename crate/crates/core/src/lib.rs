//! Per-pixel adaptive depth bins predicted coarse-to-fine on top of a small
//! encoder-decoder, trained with region queries and a foveated Chamfer loss.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod query;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
