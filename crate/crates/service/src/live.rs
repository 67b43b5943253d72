use std::sync::Arc;
use std::time::Instant;

use ispeech_core::stream::{window_samples, RingBuffer};
use ispeech_core::{preprocess, Chunk, ClassLabel, DecoderModel, FilterState, Result};
use serde::{Deserialize, Serialize};

use crate::protocol::{InferenceEvent, SignalFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Minimum confidence for an emitted command.
    pub theta_cmd: f64,
    /// Repeats of the shown command within this interval are marked debounced.
    pub debounce_s: f64,
    pub window_s: f64,
    pub buffer_s: f64,
    /// Sample rate of telemetry signal frames.
    pub telemetry_rate_hz: f64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            theta_cmd: 0.5,
            debounce_s: 1.0,
            window_s: 2.0,
            buffer_s: 10.0,
            telemetry_rate_hz: 50.0,
        }
    }
}

/// Block-mean downsampler carrying partial blocks across chunks.
#[derive(Debug, Clone)]
pub struct Decimator {
    factor: usize,
    out_rate_hz: f64,
    in_rate_hz: f64,
    sums: Vec<f64>,
    filled: usize,
    block_start_s: f64,
}

impl Decimator {
    pub fn new(n_channels: usize, in_rate_hz: u32, out_rate_hz: f64) -> Self {
        let factor = ((in_rate_hz as f64 / out_rate_hz).round() as usize).max(1);
        Self {
            factor,
            out_rate_hz: in_rate_hz as f64 / factor as f64,
            in_rate_hz: in_rate_hz as f64,
            sums: vec![0.0; n_channels],
            filled: 0,
            block_start_s: 0.0,
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Frame of the blocks completed by `chunk`, if any.
    pub fn push(&mut self, chunk: &Chunk) -> Option<SignalFrame> {
        let c = chunk.n_channels;
        let n = chunk.n_samples();
        let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(n / self.factor + 1); c];
        let mut first_ts = None;
        for s in 0..n {
            if self.filled == 0 {
                self.block_start_s = chunk.timestamp_s + s as f64 / self.in_rate_hz;
            }
            for ch in 0..c {
                self.sums[ch] += chunk.data[ch * n + s] as f64;
            }
            self.filled += 1;
            if self.filled == self.factor {
                first_ts.get_or_insert(self.block_start_s);
                for ch in 0..c {
                    out[ch].push((self.sums[ch] / self.factor as f64) as f32);
                    self.sums[ch] = 0.0;
                }
                self.filled = 0;
            }
        }
        first_ts.map(|t| SignalFrame {
            timestamp_s: t,
            sampling_rate_hz: self.out_rate_hz,
            n_channels: c,
            data: out.concat(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TickOutput {
    pub frame: Option<SignalFrame>,
    pub event: Option<InferenceEvent>,
}

/// Per-chunk live decoding: preprocess, buffer, window, infer, gate.
#[derive(Debug, Clone)]
pub struct LiveLoop {
    model: Arc<DecoderModel>,
    config: LiveConfig,
    filter: FilterState,
    buffer: RingBuffer,
    decimator: Decimator,
    window_len: usize,
    last_shown: Option<(ClassLabel, f64)>,
    pub skipped_discontiguous: u64,
    pub ticks: u64,
}

impl LiveLoop {
    pub fn new(model: Arc<DecoderModel>, sampling_rate_hz: u32, config: LiveConfig) -> Result<Self> {
        let c = model.config().n_channels;
        let window_len = window_samples(config.window_s, sampling_rate_hz);
        if window_len != model.config().window_samples {
            return Err(ispeech_core::Error::Config(format!(
                "{} s at {sampling_rate_hz} Hz is {window_len} samples, model expects {}",
                config.window_s,
                model.config().window_samples
            )));
        }
        let capacity = window_samples(config.buffer_s, sampling_rate_hz);
        Ok(Self {
            filter: FilterState::new(c, sampling_rate_hz),
            buffer: RingBuffer::new(c, sampling_rate_hz, capacity)?,
            decimator: Decimator::new(c, sampling_rate_hz, config.telemetry_rate_hz),
            window_len,
            model,
            config,
            last_shown: None,
            skipped_discontiguous: 0,
            ticks: 0,
        })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<DecoderModel> {
        &self.model
    }

    /// Processes one raw chunk. `arrived` is when the chunk's last sample
    /// became available; latency is measured from it (0 when absent).
    pub fn tick(&mut self, raw: &Chunk, arrived: Option<Instant>) -> Result<TickOutput> {
        self.ticks += 1;
        let chunk = preprocess(raw, &mut self.filter)?;
        self.buffer.append(&chunk)?;
        let frame = self.decimator.push(&chunk);
        let Some(window) = self.buffer.latest_window(self.config.window_s) else {
            return Ok(TickOutput { frame, event: None });
        };
        debug_assert_eq!(window.n_samples, self.window_len);
        if !window.contiguous {
            self.skipped_discontiguous += 1;
            return Ok(TickOutput { frame, event: None });
        }
        let distribution = self.model.forward_intent(&window.data)?;
        let emitted_command = (distribution.argmax != ClassLabel::Rest
            && distribution.confidence >= self.config.theta_cmd)
            .then_some(distribution.argmax);
        let mut debounced = false;
        if let Some(cmd) = emitted_command {
            match self.last_shown {
                Some((last, t)) if last == cmd && window.end_timestamp_s - t < self.config.debounce_s => {
                    debounced = true
                }
                _ => self.last_shown = Some((cmd, window.end_timestamp_s)),
            }
        }
        let latency_ms = arrived.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
        Ok(TickOutput {
            frame,
            event: Some(InferenceEvent {
                end_timestamp_s: window.end_timestamp_s,
                distribution,
                emitted_command,
                debounced,
                latency_ms,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ispeech_core::ModelConfig;

    fn small_model() -> Arc<DecoderModel> {
        let mut cfg = ModelConfig::with_channels(2);
        cfg.d_model = 16;
        cfg.ffn_dim = 16;
        cfg.n_heads = 2;
        Arc::new(DecoderModel::new(cfg, 1).unwrap())
    }

    fn chunk(i: usize) -> Chunk {
        let data = (0..50).map(|k| ((i * 50 + k) as f32 * 0.37).sin() * 1e-5).collect();
        Chunk::new(i as f64 * 0.1, 2, data).unwrap()
    }

    #[test]
    fn no_event_until_window_full() {
        let mut lp = LiveLoop::new(small_model(), 250, LiveConfig::default()).unwrap();
        for i in 0..19 {
            let out = lp.tick(&chunk(i), None).unwrap();
            assert!(out.event.is_none());
            assert_eq!(out.frame.unwrap().data.len(), 10);
        }
        let ev = lp.tick(&chunk(19), None).unwrap().event.unwrap();
        assert!((ev.end_timestamp_s - 2.0).abs() < 1e-9);
        assert_eq!(ev.latency_ms, 0.0);
        if let Some(c) = ev.emitted_command {
            assert_ne!(c, ClassLabel::Rest);
            assert!(ev.distribution.confidence >= 0.5);
        }
    }

    #[test]
    fn gap_skips_ticks() {
        let mut lp = LiveLoop::new(small_model(), 250, LiveConfig::default()).unwrap();
        for i in (0..25).filter(|&i| i != 10) {
            lp.tick(&chunk(i), None).unwrap();
        }
        // every full window so far spans the missing chunk
        assert_eq!(lp.skipped_discontiguous, 5);
    }

    #[test]
    fn decimator_block_means() {
        let mut d = Decimator::new(1, 250, 50.0);
        assert_eq!(d.factor(), 5);
        let c = Chunk::new(1.0, 1, (0..7).map(|v| v as f32).collect()).unwrap();
        let f = d.push(&c).unwrap();
        assert_eq!(f.data, vec![2.0]);
        assert_eq!(f.timestamp_s, 1.0);
        let c = Chunk::new(1.028, 1, (7..10).map(|v| v as f32).collect()).unwrap();
        let f = d.push(&c).unwrap();
        assert_eq!(f.data, vec![7.0]);
        assert!((f.timestamp_s - 1.02).abs() < 1e-12);
    }
}
