//! Collaborative-experts joint video-text embeddings.
//!
//! Video side: per-expert aggregation, projection to a common width,
//! collaborative gating and gated embedding modules. Text side: NetVLAD over
//! word vectors, per-expert gated embeddings and softmax mixture weights.
//! Training uses a bidirectional max-margin ranking loss on a small
//! reverse-mode tape; evaluation reports recall@K and median/mean rank.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common double-precision choice.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod record;
pub mod report;
pub mod scalar;
pub mod similarity;
pub mod tensor;
pub mod text_encoder;
pub mod training;
pub mod video_encoder;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, Variant};
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ParamsF64 = params::ParamStore<f64>;
pub type ParamsF32 = params::ParamStore<f32>;
pub type VideoRecordF64 = record::VideoRecord<f64>;
pub type JointEmbeddingF64 = video_encoder::JointEmbedding<f64>;
pub type TextEmbeddingF64 = text_encoder::TextEmbedding<f64>;
