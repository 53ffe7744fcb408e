//! Contrastive audio pre-training with structured time/frequency masking.
//!
//! Two augmented views of each clip are turned into log-Mel patch tokens,
//! masked along whole time columns and frequency rows, encoded by a small
//! transformer and pulled together with a symmetric InfoNCE loss. The crate
//! also ships the evaluation side: linear, layer-wise, weighted-sum and
//! attentive probes and an effective-rank diagnostic for dimensional collapse.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod dsp;
pub mod experiment;
pub mod gradsuite;
pub mod model;
pub mod objective;
pub mod patch;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Crate-level error joining every module's failure modes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Mel(#[from] dsp::MelError),
    #[error(transparent)]
    Wav(#[from] dsp::WavError),
    #[error(transparent)]
    Spectrogram(#[from] dsp::SpectrogramError),
    #[error(transparent)]
    Waveform(#[from] dsp::WaveformError),
    #[error(transparent)]
    Patch(#[from] patch::PatchError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error("{0}")]
    Invalid(String),
    /// A check or run completed but did not meet its requirement.
    #[error("{0}")]
    Failed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the failure stems from bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Invalid(_) | Error::Train(train::TrainError::Mismatch(_))
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().display().to_string();
        move |source| Error::Io { path, source }
    }
}
