//! Anomaly prediction for multivariate time series by contrasting two
//! forecasts: one of the observed window and one of a purified,
//! frequency-domain reconstruction of it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the OS live in the `redf` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dfm;
mod error;
pub mod fft;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rem;
pub mod rng;
pub mod tensor;

pub use config::{Config, MaskMode};
pub use error::Error;
pub use model::RedF;

pub use tensor::Tensor;

pub type Result<T> = core::result::Result<T, Error>;
