//! Deep LSTM sequence labelling.
//!
//! The crate provides a peephole LSTM layer with input- and output-projection
//! variants, feed-forward and conventional recurrent layers, an architecture
//! language for stacking them, truncated-BPTT training over parallel
//! streams, and asynchronous multi-worker SGD.

pub mod asgd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod manifest;
pub mod net;
pub mod numerics;
pub mod params;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, ErrorKind, Result};
pub use net::{Network, NetworkSpec};
pub use numerics::{Activation, Matrix, Vector};
pub use params::Parameters;
