//! Imagined-speech EEG decoding: preprocessing, streaming transport, the
//! dual transformer decoder, and per-user personalization.

pub mod archive;
pub mod decoder;
mod error;
pub mod fsutil;
pub mod metrics;
pub mod personalization;
pub mod signal;
pub mod stream;
pub mod synth;

pub use decoder::{Decoder, DecoderModel, IntentDistribution, ModelConfig, TrainConfig, TrainReport};
pub use error::{Error, Result};
pub use signal::{
    notch_filter_60hz, preprocess, rescale_amplitude, ChannelRole, ChannelSpec, Chunk, ClassLabel, DeviceProfile,
    Epoch, FilterState,
};
