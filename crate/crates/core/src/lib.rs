//! Semantic-subspace latent diffusion over 3DMM expression parameter
//! sequences: data-driven lip/eye/global disentanglement, an
//! audio-conditioned spatio-temporal denoiser with classifier-free
//! guidance, a parameter-level lip-sync model, synthetic oracle data,
//! and evaluation metrics.

pub mod autograd;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod disentangle;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod syncmodel;
pub mod synthdata;
pub mod types;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use types::{
    AudioFeatureSequence, ExpressionSequence, LatentSequence, NoiseSchedule, NormStats,
    SubspacePartition,
};

/// Default working precision for the CLI and pipelines.
pub type Real = f64;

pub type ExpressionSequenceF32 = ExpressionSequence<f32>;
pub type ExpressionSequenceF64 = ExpressionSequence<f64>;
pub type AudioFeatureSequenceF32 = AudioFeatureSequence<f32>;
pub type AudioFeatureSequenceF64 = AudioFeatureSequence<f64>;
pub type LatentSequenceF32 = LatentSequence<f32>;
pub type LatentSequenceF64 = LatentSequence<f64>;
pub type NoiseScheduleF32 = NoiseSchedule<f32>;
pub type NoiseScheduleF64 = NoiseSchedule<f64>;
