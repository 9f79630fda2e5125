//! Quasi-recurrent neural networks on a small CPU tensor substrate.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lstm;
pub mod models;
pub mod params;
pub mod qrnn;
pub mod regularization;
pub mod seq2seq;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::Parameters;
pub use tensor::{Rng, Scalar, Tensor};
