//! Radiance-field stylization driven by sliced Wasserstein feature matching.

pub mod attention;
pub mod cli;
mod error;
pub mod fixtures;
pub mod io;
pub mod metrics;
pub mod nerf;
pub mod style;
pub mod tensor_io;
pub mod trainer;
pub mod vgg;

pub use error::{Error, Result};
pub use stylefield_tensor as tensor;
