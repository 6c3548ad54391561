//! Low-dimensional representations of arc therapy plans and simulated-annealing
//! plan optimization in full aperture space or learned latent spaces.

pub mod anneal;
pub mod arcdata;
pub mod checkpoint;
pub mod cli;
pub mod dose;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod nn;
pub mod pca;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
