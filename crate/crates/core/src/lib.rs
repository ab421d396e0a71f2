//! Text variational autoencoders with fraternal-dropout decoder regularization.
//!
//! The crate is organised bottom-up: [`autodiff`] provides a reverse-mode tape
//! over [`tensor::Tensor`]s, [`nn`] the LSTM and word-dropout machinery,
//! [`model`] the encoder/decoder pair, [`objectives`] the training losses,
//! [`trainer`] the optimisation loop, [`metrics`] the evaluation suite and
//! [`corpus`] data handling. [`cli`] ties everything together.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
