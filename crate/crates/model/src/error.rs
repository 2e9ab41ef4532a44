use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Prediction(#[from] opdd_core::prediction::PredictionError),
    #[error(transparent)]
    Loss(#[from] opdd_core::LossError),
    #[error(transparent)]
    Metrics(#[from] opdd_core::MetricsError),
    #[error(transparent)]
    Data(#[from] opdd_data::DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("empty training split")]
    EmptyDataset,
    #[error("checkpoint predicts {model} anchors but the data uses {data}")]
    AnchorMismatch { model: String, data: String },
    #[error("non-finite loss at step {step}, epoch {epoch}; batch dumped to {dump}")]
    NonFiniteLoss { step: u64, epoch: usize, dump: PathBuf },
    #[error("plot: {0}")]
    Plot(String),
}

impl ModelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
