//! Implicit U-Net: a 3D CNN encoder whose feature pyramid conditions a
//! coordinate MLP, trained on sparse point samples and evaluated sparsely
//! at inference time.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for the model, `f64`
//! for gradient checks).

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod model;
pub mod optim;
pub mod points;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Activation, GradCheckReport, Gradients, Graph, Var};
pub use bench::{bench_compare, BenchRecord, BenchReport};
pub use data::{Case, DatasetStats, ImageVolume, LabelVolume, SynthConfig, Volume};
pub use decoder::{DecoderConfig, DecoderParams};
pub use encoder::{EncoderConfig, EncoderParams, FeaturePyramid};
pub use error::{Error, Result};
pub use inference::{InferenceConfig, PredictionStats, ProbVolume};
pub use model::{ImplicitUNet, ModelConfig};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use points::{PointBatch, SamplerConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{Checkpoint, StepMetrics, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = ImplicitUNet<f32>;
pub type Checkpoint32 = Checkpoint<f32>;
