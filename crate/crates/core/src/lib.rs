//! Parallel explanatory models for small recurrent fault detectors.
//!
//! The crate trains tanh RNN detectors on Gaussian-mixture feature streams,
//! then rebuilds their behaviour twice: a sample-level linearized model that
//! runs alongside the network, and a distribution-level model that splits
//! each layer's output into main lobes and sidelobes.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod distmodel;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod histogram;
pub mod linearizer;
pub mod rng;
pub mod rnn;
pub mod scenario;

pub use error::{Error, Result};
