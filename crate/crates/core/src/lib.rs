//! Multi-channel Vision Transformer with channel/token diversification
//! losses and diverse channel sampling, built on a small f64 autograd tape.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradCheckOptions, Tape, Tensor, Var};
