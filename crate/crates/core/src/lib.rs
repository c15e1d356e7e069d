//! Spatially-adaptive multi-Gaussian regularization for diffeomorphic image
//! registration with a vector-momentum stationary velocity field model.

pub mod autodiff;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod kernels;
pub mod optimizer;
pub mod regressor;
pub mod synth;
pub mod vsvf;

pub use error::{Error, Result};
pub use field::{Grid, ScalarField, VectorField};
