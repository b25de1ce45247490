//! Direction-aggregated transferable adversarial attacks.
//!
//! The crate bundles everything needed to craft and evaluate transferable
//! L∞ adversarial examples at desk scale:
//!
//! - [`tensor`]: dense `f64` tensors, sign/clip/convolution primitives, noise.
//! - [`net`]: small classifiers with exact input and parameter gradients,
//!   SGD and PGD adversarial training, datasets and model files.
//! - [`transforms`]: diverse-input resize-and-pad and Gaussian gradient smoothing.
//! - [`attacks`]: the unified attack loop, its named presets and ensembles.
//! - [`analysis`]: success rates, transfer tables, perturbation similarity, sweeps.
//! - [`harness`]: experiment configs, the model zoo and the CLI commands.

pub mod analysis;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
