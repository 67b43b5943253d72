use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, profile or argument combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or non-finite signal data, bad labels, empty datasets.
    #[error("data error: {0}")]
    Data(String),
    /// Stream registry and transport failures.
    #[error("stream error: {0}")]
    Stream(String),
    /// Acquisition interrupted before enough data was collected.
    #[error("capture error after {collected_s:.1} of {target_s:.1} s: {reason}")]
    Capture {
        reason: String,
        collected_s: f64,
        target_s: f64,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Neural(#[from] ispeech_neural::NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
