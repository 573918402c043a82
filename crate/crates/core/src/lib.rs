//! Pattern-matching dynamic memory network for spatio-temporal forecasting.
//!
//! The crate is organised bottom-up: [`temporal`] maps timestamps to the
//! learnable time embedding, [`dmn`] is the memory-network transform,
//! [`dpmgru`] wraps three of them into a recurrent cell, [`tam`] produces the
//! per-horizon states for parallel decoding and [`model`] assembles the whole
//! forecaster. [`training`], [`data`] and [`metrics`] cover the experiment
//! loop, and [`dgc`], [`flops`] and [`bench`] hold the graph-convolution
//! baseline used for the complexity comparison.

pub mod artifact;
pub mod bench;
pub mod bind;
pub mod data;
pub mod dgc;
pub mod dmn;
pub mod dpmgru;
mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod tam;
pub mod temporal;
pub mod training;

pub use bind::Binder;
pub use error::{Error, Result};
