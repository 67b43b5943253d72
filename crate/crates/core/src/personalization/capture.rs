use std::time::{Duration, Instant};

use crate::decoder::DecoderModel;
use crate::error::{Error, Result};
use crate::signal::{preprocess, Chunk, FilterState};
use crate::stream::{window_samples, Inlet, DEFAULT_WINDOW_S};

pub const REST_CAPTURE_S: f64 = 30.0;

/// True when `next` does not start where `prev_end` left off (more than half
/// a sample period apart).
pub(crate) fn is_gap(prev_end_s: f64, next_start_s: f64, sampling_rate_hz: u32) -> bool {
    (next_start_s - prev_end_s).abs() > 0.5 / sampling_rate_hz as f64
}

/// Accumulates preprocessed chunks until `duration_s` of gap-free signal is
/// collected. A gap fails the capture.
#[derive(Debug, Clone)]
pub struct RestCapture {
    n_channels: usize,
    sampling_rate_hz: u32,
    target_samples: usize,
    duration_s: f64,
    // Per channel.
    data: Vec<Vec<f32>>,
    next_timestamp_s: Option<f64>,
}

impl RestCapture {
    pub fn new(n_channels: usize, sampling_rate_hz: u32, duration_s: f64) -> Result<Self> {
        let target_samples = (duration_s * sampling_rate_hz as f64).round() as usize;
        let win = window_samples(DEFAULT_WINDOW_S, sampling_rate_hz);
        if n_channels == 0 || sampling_rate_hz == 0 || target_samples < win {
            return Err(Error::Config(format!(
                "rest capture of {duration_s} s is shorter than one {DEFAULT_WINDOW_S} s window"
            )));
        }
        Ok(Self {
            n_channels,
            sampling_rate_hz,
            target_samples,
            duration_s,
            data: vec![Vec::with_capacity(target_samples); n_channels],
            next_timestamp_s: None,
        })
    }

    pub fn collected_samples(&self) -> usize {
        self.data[0].len()
    }

    pub fn progress_s(&self) -> f64 {
        self.collected_samples() as f64 / self.sampling_rate_hz as f64
    }

    pub fn target_s(&self) -> f64 {
        self.duration_s
    }

    pub fn is_complete(&self) -> bool {
        self.collected_samples() >= self.target_samples
    }

    fn error(&self, reason: String) -> Error {
        Error::Capture {
            reason,
            collected_s: self.progress_s(),
            target_s: self.duration_s,
        }
    }

    /// Appends a preprocessed chunk and returns the progress in seconds.
    /// Samples past the target are ignored.
    pub fn push(&mut self, chunk: &Chunk) -> Result<f64> {
        if chunk.n_channels != self.n_channels {
            return Err(Error::Config(format!(
                "chunk has {} channels, capture expects {}",
                chunk.n_channels, self.n_channels
            )));
        }
        if let Some(expected) = self.next_timestamp_s {
            if is_gap(expected, chunk.timestamp_s, self.sampling_rate_hz) {
                return Err(self.error(format!(
                    "stream gap: expected a chunk at {expected:.4} s, got {:.4} s",
                    chunk.timestamp_s
                )));
            }
        }
        let n = chunk.n_samples();
        self.next_timestamp_s = Some(chunk.timestamp_s + n as f64 / self.sampling_rate_hz as f64);
        let take = n.min(self.target_samples - self.collected_samples());
        for ch in 0..self.n_channels {
            self.data[ch].extend_from_slice(&chunk.channel(ch)[..take]);
        }
        Ok(self.progress_s())
    }

    /// Non-overlapping 2-s windows `[n_channels][window]` over the collected
    /// signal.
    pub fn windows(&self) -> Vec<Vec<f32>> {
        let win = window_samples(DEFAULT_WINDOW_S, self.sampling_rate_hz);
        let n = self.collected_samples() / win;
        (0..n)
            .map(|w| {
                let mut out = Vec::with_capacity(self.n_channels * win);
                for ch in &self.data {
                    out.extend_from_slice(&ch[w * win..(w + 1) * win]);
                }
                out
            })
            .collect()
    }
}

/// Mean of the windows' signatures, renormalised to unit length.
pub fn signature_from_windows(model: &DecoderModel, windows: &[Vec<f32>]) -> Result<Vec<f32>> {
    if windows.is_empty() {
        return Err(Error::Data("no windows for a signature".into()));
    }
    let refs: Vec<&[f32]> = windows.iter().map(Vec::as_slice).collect();
    let out = model.infer_many(&refs, 16)?;
    let dim = model.config().signature_dim;
    let mut mean = vec![0.0f64; dim];
    for (_, sig) in &out {
        for (m, &s) in mean.iter_mut().zip(sig) {
            *m += s as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Data("signature windows cancel out".into()));
    }
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct RestSignature {
    pub signature: Vec<f32>,
    /// The preprocessed windows the signature was computed from.
    pub windows: Vec<Vec<f32>>,
}

/// Pulls `duration_s` of raw signal from `inlet`, preprocesses it with a
/// fresh filter state and returns the resting signature. `timeout` bounds
/// the wait for each chunk.
pub fn capture_resting_signature(
    inlet: &Inlet,
    duration_s: f64,
    model: &DecoderModel,
    timeout: Duration,
) -> Result<RestSignature> {
    let profile = &inlet.info().profile;
    if profile.n_channels() != model.config().n_channels {
        return Err(Error::Config(format!(
            "stream has {} channels, model expects {}",
            profile.n_channels(),
            model.config().n_channels
        )));
    }
    let mut capture = RestCapture::new(profile.n_channels(), profile.sampling_rate_hz, duration_s)?;
    let mut filter = FilterState::for_profile(profile);
    while !capture.is_complete() {
        let started = Instant::now();
        let chunk = match inlet.pull(timeout) {
            Ok(Some(c)) => c,
            Ok(None) => {
                return Err(capture.error(format!("no chunk within {:.1} s", started.elapsed().as_secs_f64())))
            }
            Err(e) => return Err(capture.error(format!("stream ended: {e}"))),
        };
        capture.push(&preprocess(&chunk, &mut filter)?)?;
    }
    let windows = capture.windows();
    let signature = signature_from_windows(model, &windows)?;
    Ok(RestSignature { signature, windows })
}
