//! Desk-scale laboratory for training deterministic forecast emulators of a
//! two-scale chaotic system under weak-constraint 4DVar-derived loss
//! functions, with the eigen, latent-space and diagnostic machinery needed
//! to verify the underlying covariance-weighting arguments against a
//! synthetic truth with known error statistics.

pub mod autoencoder;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod forecast;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod reanalysis;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
