//! Haar sub-band losses, frequency-bias diagnostics, spectral analysis and a
//! desk-scale wavelet generator with latent-optimization tooling.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod imageio;
pub mod inversion;
pub mod metrics;
pub mod par;
pub mod spectrum;
pub mod synthesis;
pub mod tensor;
pub mod theory;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Shape, Tensor};
