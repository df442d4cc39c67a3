//! Frame-level online video-to-audio generation on a toy audio-visual
//! process: interleaved autoregressive transformer, diffusion head, and
//! consistency tuning for few-step sampling.

pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod codec;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rope;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
