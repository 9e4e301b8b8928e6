//! Residual conditional diffusion for pansharpening-style image fusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensorio`] raster container, `.ten` files and dataset manifests
//! * [`schedule`], [`diffusion`], [`sampler`] the diffusion process itself
//! * [`wavelet`], [`conditioning`], [`denoiser`] the conditional network
//! * [`nn`] a small reverse-mode autodiff engine the network is built on
//! * [`datasim`], [`metrics`], [`trainer`] data, evaluation and training

pub mod conditioning;
pub mod datasim;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod tensorio;
pub mod trainer;
pub mod wavelet;

pub use conditioning::ConditionBundle;
pub use datasim::{FusionSample, SynthConfig};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
pub use diffusion::{NoisyState, Prediction, PredictionKind};
pub use error::{Error, Result};
pub use metrics::{MetricConfig, MetricReport};
pub use sampler::{SamplerKind, SamplerPlan};
pub use schedule::NoiseSchedule;
pub use tensorio::{DatasetManifest, ImageTensor, Split, ValueRange};
pub use trainer::{CheckpointManifest, TrainConfig};
pub use wavelet::WaveletBands;
