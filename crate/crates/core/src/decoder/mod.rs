//! Dual sequential transformer decoder: per-channel patch convolution,
//! temporal encoder with relative-position attention, spatial encoder across
//! channels, and intent and signature heads.

mod config;
mod model;
mod train;

pub use config::ModelConfig;
pub use model::{config_path, Decoder, DecoderModel, Forward, IntentDistribution, Train};
pub use train::{class_counts, evaluate_accuracy, train_supervised, train_supervised_with_progress, HoldoutReport, TrainConfig, TrainReport};

/// Double-precision instantiation, used for gradient checks.
pub type Decoder64 = Decoder<f64>;
