//! Gradient-free training of inverse-funnel generative decoders.
//!
//! A decoder maps a free latent code through feedforward or conv-unpool
//! layers to the data. Training never differentiates anything: each layer is
//! fitted by alternately solving determined least-squares systems for the
//! per-datapoint latents and for the weights, starting at the data and
//! walking down to the code.

pub mod activation;
pub mod cli;
pub mod conv_layer;
pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod ff_layer;
pub mod layer;
pub mod linalg;
pub mod parallel;
mod rng;
pub mod trainer;

pub use activation::Activation;
pub use conv_layer::{ConvShape, ConvUnpoolLayer, WeightSampling};
pub use error::{Error, Result};
pub use ff_layer::FeedforwardLayer;
pub use layer::{Layer, LayerSpec};
pub use linalg::Matrix;
pub use trainer::{Architecture, Model, TrainConfig};
