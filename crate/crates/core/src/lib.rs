//! Multidimensional membership mixture (M3) models.
//!
//! Every data point carries one membership per dimension, each drawn from its
//! own mixture, and the observation density combines the selected components.
//! Three instantiations are provided:
//!
//! * [`infinite`]: two coupled Dirichlet-process mixtures sampled by Gibbs
//!   sampling with auxiliary components (the one-dimensional DPMM is the fully
//!   coupled special case),
//! * [`finite`]: a two-dimensional topic model trained by variational EM (LDA
//!   is the `omega = 1`, `K2 = 1` special case),
//! * [`hybrid`]: a DP mixture in one dimension and a finite mixture in the
//!   other.

pub mod error;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod finite;
pub mod gaussian;
pub mod hybrid;
pub mod infinite;
pub mod optim;
pub mod par;
pub mod rng;
pub mod special;
pub mod synth;
pub mod types;

pub use error::{M3Error, Result};
