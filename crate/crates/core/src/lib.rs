//! A desk-scale image captioner built around a meshed transformer decoder,
//! with memory-augmented and static-expansion encoder attention.
//!
//! Everything runs on a small tape-based autodiff engine ([`autograd`]) over
//! dense `f64` tensors so each mechanism can be checked against finite
//! differences.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
