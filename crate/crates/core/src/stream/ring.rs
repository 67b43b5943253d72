use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::signal::{Chunk, DeviceProfile};

pub const DEFAULT_WINDOW_S: f64 = 2.0;
pub const DEFAULT_CAPACITY_S: f64 = 10.0;

/// Fixed-capacity multi-channel sample ring with a monotonically increasing
/// write cursor. Overflow drops the oldest samples.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    n_channels: usize,
    sampling_rate_hz: u32,
    capacity: usize,
    write_cursor: u64,
    // Cursor below which samples are no longer valid (set by `clear`).
    valid_from: u64,
    storage: Vec<f32>,
    timestamps: Vec<f64>,
}

/// A decision window copied out of the ring.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    pub n_channels: usize,
    pub n_samples: usize,
    /// Row-major `[n_channels][n_samples]`.
    pub data: Vec<f32>,
    /// Timestamp of the first sample.
    pub start_timestamp_s: f64,
    /// Timestamp one sample period past the last sample.
    pub end_timestamp_s: f64,
    /// Write cursor value just past the last sample.
    pub end_cursor: u64,
    /// False when the timestamps reveal a gap inside the window.
    pub contiguous: bool,
}

impl WindowView {
    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }
}

pub fn window_samples(window_s: f64, sampling_rate_hz: u32) -> usize {
    (window_s * sampling_rate_hz as f64).round() as usize
}

impl RingBuffer {
    pub fn new(n_channels: usize, sampling_rate_hz: u32, capacity_samples: usize) -> Result<Self> {
        if n_channels == 0 || sampling_rate_hz == 0 {
            return Err(Error::Config("ring buffer needs channels and a positive rate".into()));
        }
        let min = 2 * window_samples(DEFAULT_WINDOW_S, sampling_rate_hz);
        if capacity_samples < min {
            return Err(Error::Config(format!(
                "capacity {capacity_samples} is below twice the {DEFAULT_WINDOW_S}-s window ({min})"
            )));
        }
        Ok(Self {
            n_channels,
            sampling_rate_hz,
            capacity: capacity_samples,
            write_cursor: 0,
            valid_from: 0,
            storage: vec![0.0; n_channels * capacity_samples],
            timestamps: vec![0.0; capacity_samples],
        })
    }

    /// Ten seconds of storage for the profile's rate.
    pub fn for_profile(profile: &DeviceProfile) -> Self {
        let cap = window_samples(DEFAULT_CAPACITY_S, profile.sampling_rate_hz);
        Self::new(profile.n_channels(), profile.sampling_rate_hz, cap).expect("profile capacity")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn sampling_rate_hz(&self) -> u32 {
        self.sampling_rate_hz
    }

    pub fn write_cursor(&self) -> u64 {
        self.write_cursor
    }

    /// Samples currently held (at most `capacity`).
    pub fn len(&self) -> usize {
        (self.write_cursor - self.valid_from).min(self.capacity as u64) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.write_cursor == 0
    }

    /// Forgets all samples; the cursor keeps counting.
    pub fn clear(&mut self) {
        let cursor = self.write_cursor;
        *self = Self::new(self.n_channels, self.sampling_rate_hz, self.capacity).expect("same geometry");
        self.write_cursor = cursor;
        self.valid_from = cursor;
    }

    pub fn append(&mut self, chunk: &Chunk) -> Result<()> {
        if chunk.n_channels != self.n_channels {
            return Err(Error::Data(format!(
                "chunk has {} channels, buffer holds {}",
                chunk.n_channels, self.n_channels
            )));
        }
        let n = chunk.n_samples();
        let period = 1.0 / self.sampling_rate_hz as f64;
        for i in 0..n {
            let slot = ((self.write_cursor + i as u64) % self.capacity as u64) as usize;
            self.timestamps[slot] = chunk.timestamp_s + i as f64 * period;
            for ch in 0..self.n_channels {
                self.storage[ch * self.capacity + slot] = chunk.data[ch * n + i];
            }
        }
        self.write_cursor += n as u64;
        Ok(())
    }

    /// Most recent `window_s` seconds, or `None` when fewer samples exist.
    pub fn latest_window(&self, window_s: f64) -> Option<WindowView> {
        let n = window_samples(window_s, self.sampling_rate_hz);
        let available = self.write_cursor - self.valid_from;
        if n == 0 || n > self.capacity || (available as usize) < n {
            return None;
        }
        let start_cursor = self.write_cursor - n as u64;
        let start_slot = (start_cursor % self.capacity as u64) as usize;
        let first = (self.capacity - start_slot).min(n);
        let mut data = Vec::with_capacity(self.n_channels * n);
        for ch in 0..self.n_channels {
            let row = &self.storage[ch * self.capacity..(ch + 1) * self.capacity];
            data.extend_from_slice(&row[start_slot..start_slot + first]);
            data.extend_from_slice(&row[..n - first]);
        }
        let ts = |k: usize| self.timestamps[(start_slot + k) % self.capacity];
        let period = 1.0 / self.sampling_rate_hz as f64;
        let contiguous = (1..n).all(|k| {
            let d = ts(k) - ts(k - 1);
            d > 0.5 * period && d <= 1.5 * period
        });
        Some(WindowView {
            n_channels: self.n_channels,
            n_samples: n,
            data,
            start_timestamp_s: ts(0),
            end_timestamp_s: ts(n - 1) + period,
            end_cursor: self.write_cursor,
            contiguous,
        })
    }
}

/// Ring buffer shared between one writer and concurrent readers. Readers see
/// a consistent snapshot: a window never mixes data from before and after an
/// overwrite.
#[derive(Debug, Clone)]
pub struct SharedRingBuffer {
    inner: Arc<RwLock<RingBuffer>>,
}

impl SharedRingBuffer {
    pub fn new(buffer: RingBuffer) -> Self {
        Self {
            inner: Arc::new(RwLock::new(buffer)),
        }
    }

    pub fn append(&self, chunk: &Chunk) -> Result<()> {
        self.inner.write().append(chunk)
    }

    pub fn latest_window(&self, window_s: f64) -> Option<WindowView> {
        self.inner.read().latest_window(window_s)
    }

    pub fn write_cursor(&self) -> u64 {
        self.inner.read().write_cursor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_chunk(start: u64, n: usize, channels: usize, rate: u32) -> Chunk {
        let mut data = Vec::with_capacity(n * channels);
        for ch in 0..channels {
            for i in 0..n {
                data.push(((start + i as u64) as f32) + ch as f32 * 1e5);
            }
        }
        Chunk::new(start as f64 / rate as f64, channels, data).unwrap()
    }

    #[test]
    fn cursor_advances_and_rejects_wrong_channels() {
        let mut buf = RingBuffer::new(2, 250, 1000).unwrap();
        buf.append(&ramp_chunk(0, 25, 2, 250)).unwrap();
        assert_eq!(buf.write_cursor(), 25);
        assert!(buf.append(&ramp_chunk(25, 25, 3, 250)).is_err());
        assert_eq!(buf.write_cursor(), 25);
    }

    #[test]
    fn small_capacity_rejected() {
        assert!(RingBuffer::new(1, 250, 999).is_err());
    }

    #[test]
    fn window_availability() {
        let mut buf = RingBuffer::new(1, 250, 1000).unwrap();
        buf.append(&ramp_chunk(0, 499, 1, 250)).unwrap();
        assert!(buf.latest_window(2.0).is_none());
        buf.append(&ramp_chunk(499, 1, 1, 250)).unwrap();
        let w = buf.latest_window(2.0).unwrap();
        assert_eq!(w.n_samples, 500);
        assert_eq!(w.data[0], 0.0);
        assert_eq!(w.data[499], 499.0);
        assert!(w.contiguous);
        assert!((w.end_timestamp_s - w.start_timestamp_s - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gap_marks_window_discontiguous() {
        let mut buf = RingBuffer::new(1, 250, 1000).unwrap();
        buf.append(&ramp_chunk(0, 250, 1, 250)).unwrap();
        // skip 10 samples of stream time
        buf.append(&ramp_chunk(260, 250, 1, 250)).unwrap();
        assert!(!buf.latest_window(2.0).unwrap().contiguous);
    }

    #[test]
    fn clear_requires_refill() {
        let mut buf = RingBuffer::new(1, 250, 1000).unwrap();
        buf.append(&ramp_chunk(0, 600, 1, 250)).unwrap();
        buf.clear();
        assert_eq!(buf.write_cursor(), 600);
        assert!(buf.latest_window(2.0).is_none());
        buf.append(&ramp_chunk(600, 500, 1, 250)).unwrap();
        assert_eq!(buf.latest_window(2.0).unwrap().data[0], 600.0);
    }
}
