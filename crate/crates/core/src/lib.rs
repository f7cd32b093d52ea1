//! Volumetric GAN toolkit: progressive-growing and style-based 3D generators
//! trained with a Wasserstein gradient-penalty critic, hybrid GAN inversion,
//! latent-space editing and distribution metrics for gray-scale volumes.

pub mod autograd;
pub mod error;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use volume::Volume;
