//! Adversarial learning of image representations invariant to a known
//! confounder, with a synthetic confounded-data generator and a
//! probe-based evaluation harness.

pub mod adam;
mod container;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod models;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Autoencoder32 = models::Autoencoder<f32>;
pub type Autoencoder64 = models::Autoencoder<f64>;
pub type Adversary32 = models::Adversary<f32>;
pub type Adversary64 = models::Adversary<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type FeatureMatrix32 = evaluation::FeatureMatrix<f32>;
pub type FeatureMatrix64 = evaluation::FeatureMatrix<f64>;
