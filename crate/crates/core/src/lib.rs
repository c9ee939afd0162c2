//! Attention-guided differentiable frame subsampling (DAS) with a desk-scale
//! classification pipeline, baseline samplers, synthetic data and training
//! harness.

pub mod autodiff;
pub mod baselines;
pub mod classifier;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod gradsuite;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{adam_step, AdamConfig, ParameterStore};
pub use rng::RandomStream;
pub use tensor::Tensor;
