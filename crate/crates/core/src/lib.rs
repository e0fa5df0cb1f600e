//! Super-resolution by conditional implicit maximum likelihood estimation.
//!
//! A two-stage generator maps a low-resolution image and two noise maps to
//! a x4 output. Training repeatedly draws candidate noise for each example,
//! keeps the candidate whose output is nearest the ground truth in a
//! perceptual feature space (choosing the lower-stage noise first, then the
//! upper-stage noise), and takes gradient steps pulling the selected outputs
//! toward their targets.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the usual
//! precisions.

pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod features;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod nn_search;
pub mod optim;
pub mod resample;
pub mod scalar;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use dataset::{ImageU8, PairedDataset};
pub use error::{Error, Result};
pub use features::{FeatureBackend, FeatureExtractor, ProjectionMatrix};
pub use generator::{GeneratorConfig, GeneratorParams, Mode, NoisePair, SubNetworkConfig};
pub use scalar::Scalar;
pub use tensor::{Image01, Tensor};
pub use trainer::{TrainConfig, TrainHistory, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = GeneratorParams<f32>;
pub type Generator64 = GeneratorParams<f64>;
pub type FeatureExtractor32 = FeatureExtractor<f32>;
pub type FeatureExtractor64 = FeatureExtractor<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
