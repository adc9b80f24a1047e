//! UTOPYA: multimodal, physics-informed anomaly detection and time-series
//! prediction for batch distillation, at desk scale.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`tape`] / [`nn`] — a minimal reverse-mode autodiff engine over
//!   `ndarray` plus parameter storage and the AdamW optimizer.
//! - [`dataset`] — the canonical on-disk experiment format, windowing,
//!   per-experiment normalization and leak-free split search.
//! - [`simulator`] — a seeded synthetic batch-distillation plant with
//!   injectable faults, standing in for the real corpus.
//! - [`encoders`] — per-modality encoders (TCN, audio CNN, tabular MLP,
//!   vector projections, molecular GCN), all emitting 128-dim embeddings.
//! - [`fusion`] — static context aggregation, FiLM conditioning,
//!   cross-modal attention and availability-masked gated fusion.
//! - [`heads`] / [`losses`] — prediction/classification/reconstruction
//!   heads and the multi-task loss including the physics penalties.
//! - [`model`] — the assembled network and its forward pass.
//! - [`trainer`] — schedule, curriculum, augmentation, self-supervised
//!   pretraining, and the full optimization recipe.
//! - [`scoring`] — window/experiment metrics and multi-signal rank fusion.
//! - [`baselines`] — PCA T²+SPE, Isolation Forest, feedforward and LSTM
//!   autoencoders under the identical window pipeline.

pub mod baselines;
pub mod dataset;
pub mod encoders;
pub mod fusion;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod simulator;
pub mod tape;
pub mod trainer;

pub use dataset::{ExperimentRecord, Phase, SplitAssignment, WindowSample};
pub use model::{Modality, ModelConfig, UtopyaModel};
pub use trainer::{CurriculumSchedule, TrainConfig};

/// Crate-level error type shared by IO-facing and validation-facing APIs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Mix a base seed with stream identifiers into a fresh sub-seed
/// (splitmix64 finalizer). Used everywhere a component needs its own
/// deterministic RNG derived from one run seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
