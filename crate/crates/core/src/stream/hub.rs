//! Single-host publish/subscribe registry for timestamped chunk streams.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Chunk, DeviceProfile};

pub const DEFAULT_CHUNK_PERIOD_S: f64 = 0.1;
/// Chunks kept by an outlet for inspection regardless of subscribers.
pub const DEFAULT_RETENTION_CHUNKS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub stream_id: String,
    pub profile: DeviceProfile,
    pub chunk_period_s: f64,
}

impl StreamInfo {
    pub fn new(stream_id: impl Into<String>, profile: DeviceProfile, chunk_period_s: f64) -> Result<Self> {
        let info = Self {
            stream_id: stream_id.into(),
            profile,
            chunk_period_s,
        };
        info.validate()?;
        Ok(info)
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if !(self.chunk_period_s > 0.0) || !self.chunk_period_s.is_finite() {
            return Err(Error::Config(format!(
                "chunk period must be positive, got {}",
                self.chunk_period_s
            )));
        }
        let samples = self.chunk_period_s * self.profile.sampling_rate_hz as f64;
        if (samples - samples.round()).abs() > 1e-9 || samples.round() < 1.0 {
            return Err(Error::Config(format!(
                "chunk period {} s is not a whole number of samples at {} Hz",
                self.chunk_period_s, self.profile.sampling_rate_hz
            )));
        }
        Ok(())
    }

    pub fn samples_per_chunk(&self) -> usize {
        (self.chunk_period_s * self.profile.sampling_rate_hz as f64).round() as usize
    }
}

/// What an inlet does when its queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropPolicy {
    /// Unbounded queue; never loses data.
    ZeroDrop,
    /// Bounded queue that discards its oldest chunk on overflow.
    DropOldest { capacity: usize },
}

#[derive(Debug)]
struct InletQueue {
    // Each chunk with the instant it was pushed.
    queue: Mutex<VecDeque<(Chunk, Instant)>>,
    ready: Condvar,
    policy: DropPolicy,
    dropped: AtomicU64,
    closed: AtomicBool,
}

impl InletQueue {
    fn deliver(&self, chunk: Chunk, pushed_at: Instant) {
        let mut q = self.queue.lock();
        if let DropPolicy::DropOldest { capacity } = self.policy {
            while q.len() >= capacity.max(1) {
                q.pop_front();
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        q.push_back((chunk, pushed_at));
        drop(q);
        self.ready.notify_all();
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let _guard = self.queue.lock();
        self.ready.notify_all();
    }
}

#[derive(Debug)]
struct StreamShared {
    info: StreamInfo,
    subscribers: Mutex<Vec<Arc<InletQueue>>>,
    last_timestamp: Mutex<Option<f64>>,
    retained: Mutex<VecDeque<Chunk>>,
    retention: usize,
    pushed: AtomicU64,
}

/// Local stream registry. Cheap to clone; clones share the registry.
#[derive(Debug, Clone, Default)]
pub struct Hub {
    streams: Arc<Mutex<HashMap<String, Arc<StreamShared>>>>,
}

/// Publishing side of a stream. Dropping it unregisters the stream and
/// closes every inlet once their queues drain.
#[derive(Debug)]
pub struct Outlet {
    shared: Arc<StreamShared>,
    hub: Hub,
}

/// Subscribing side of a stream.
#[derive(Debug)]
pub struct Inlet {
    info: StreamInfo,
    queue: Arc<InletQueue>,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_outlet(&self, info: StreamInfo) -> Result<Outlet> {
        self.open_outlet_with_retention(info, DEFAULT_RETENTION_CHUNKS)
    }

    pub fn open_outlet_with_retention(&self, info: StreamInfo, retention: usize) -> Result<Outlet> {
        info.validate()?;
        let mut streams = self.streams.lock();
        if streams.contains_key(&info.stream_id) {
            return Err(Error::Stream(format!("stream id `{}` already in use", info.stream_id)));
        }
        let shared = Arc::new(StreamShared {
            info: info.clone(),
            subscribers: Mutex::new(Vec::new()),
            last_timestamp: Mutex::new(None),
            retained: Mutex::new(VecDeque::new()),
            retention,
            pushed: AtomicU64::new(0),
        });
        streams.insert(info.stream_id, shared.clone());
        Ok(Outlet {
            shared,
            hub: self.clone(),
        })
    }

    pub fn subscribe(&self, stream_id: &str) -> Result<Inlet> {
        self.subscribe_with_policy(stream_id, DropPolicy::ZeroDrop)
    }

    pub fn subscribe_with_policy(&self, stream_id: &str, policy: DropPolicy) -> Result<Inlet> {
        let shared = self
            .streams
            .lock()
            .get(stream_id)
            .cloned()
            .ok_or_else(|| Error::Stream(format!("unknown stream `{stream_id}`")))?;
        let queue = Arc::new(InletQueue {
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            policy,
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        });
        shared.subscribers.lock().push(queue.clone());
        Ok(Inlet {
            info: shared.info.clone(),
            queue,
        })
    }

    pub fn stream_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.streams.lock().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn info(&self, stream_id: &str) -> Option<StreamInfo> {
        self.streams.lock().get(stream_id).map(|s| s.info.clone())
    }
}

impl Outlet {
    pub fn info(&self) -> &StreamInfo {
        &self.shared.info
    }

    pub fn samples_per_chunk(&self) -> usize {
        self.shared.info.samples_per_chunk()
    }

    /// Validates and fans the chunk out to every current subscriber in order.
    pub fn push_chunk(&self, chunk: Chunk) -> Result<()> {
        let expected = self.shared.info.profile.n_channels();
        if chunk.n_channels != expected {
            return Err(Error::Data(format!(
                "chunk has {} channels, stream `{}` declares {expected}",
                chunk.n_channels, self.shared.info.stream_id
            )));
        }
        if chunk.data.is_empty() {
            return Err(Error::Data("empty chunk".into()));
        }
        {
            let mut last = self.shared.last_timestamp.lock();
            if let Some(prev) = *last {
                if chunk.timestamp_s <= prev {
                    return Err(Error::Stream(format!(
                        "timestamp {} does not increase past {prev}",
                        chunk.timestamp_s
                    )));
                }
            }
            *last = Some(chunk.timestamp_s);
        }
        self.shared.pushed.fetch_add(1, Ordering::Relaxed);
        if self.shared.retention > 0 {
            let mut r = self.shared.retained.lock();
            if r.len() == self.shared.retention {
                r.pop_front();
            }
            r.push_back(chunk.clone());
        }
        let now = Instant::now();
        let subs = self.shared.subscribers.lock();
        for sub in subs.iter() {
            sub.deliver(chunk.clone(), now);
        }
        Ok(())
    }

    /// Most recent chunks kept by the retention policy, oldest first.
    pub fn retained(&self) -> Vec<Chunk> {
        self.shared.retained.lock().iter().cloned().collect()
    }

    pub fn chunks_pushed(&self) -> u64 {
        self.shared.pushed.load(Ordering::Relaxed)
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.subscribers.lock().len()
    }
}

impl Drop for Outlet {
    fn drop(&mut self) {
        self.hub.streams.lock().remove(&self.shared.info.stream_id);
        for sub in self.shared.subscribers.lock().iter() {
            sub.close();
        }
    }
}

impl Inlet {
    pub fn info(&self) -> &StreamInfo {
        &self.info
    }

    /// Next chunk without waiting.
    pub fn try_pull(&self) -> Option<Chunk> {
        self.queue.queue.lock().pop_front().map(|(c, _)| c)
    }

    /// Waits up to `timeout` for a chunk. `Ok(None)` means the wait timed
    /// out; an error means the outlet is gone and the queue is drained.
    pub fn pull(&self, timeout: Duration) -> Result<Option<Chunk>> {
        Ok(self.pull_stamped(timeout)?.map(|(c, _)| c))
    }

    /// As [`Inlet::pull`], also returning the instant the chunk was pushed.
    pub fn pull_stamped(&self, timeout: Duration) -> Result<Option<(Chunk, Instant)>> {
        let deadline = Instant::now() + timeout;
        let mut q = self.queue.queue.lock();
        loop {
            if let Some(c) = q.pop_front() {
                return Ok(Some(c));
            }
            if self.queue.closed.load(Ordering::Acquire) {
                return Err(Error::Stream(format!("stream `{}` closed", self.info.stream_id)));
            }
            if self.queue.ready.wait_until(&mut q, deadline).timed_out() {
                return Ok(q.pop_front());
            }
        }
    }

    /// Drains everything currently queued.
    pub fn drain(&self) -> Vec<Chunk> {
        self.queue.queue.lock().drain(..).map(|(c, _)| c).collect()
    }

    pub fn queued(&self) -> usize {
        self.queue.queue.lock().len()
    }

    pub fn dropped(&self) -> u64 {
        self.queue.dropped.load(Ordering::Relaxed)
    }

    pub fn is_closed(&self) -> bool {
        self.queue.closed.load(Ordering::Acquire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(id: &str) -> StreamInfo {
        StreamInfo::new(id, DeviceProfile::wireless(), DEFAULT_CHUNK_PERIOD_S).unwrap()
    }

    fn chunk(ts: f64) -> Chunk {
        Chunk::zeros(ts, 12, 25)
    }

    #[test]
    fn chunk_geometry() {
        let wired = StreamInfo::new("a", DeviceProfile::wired(), 0.1).unwrap();
        assert_eq!(wired.samples_per_chunk(), 25);
        assert_eq!(info("b").samples_per_chunk(), 25);
        assert!(StreamInfo::new("c", DeviceProfile::wired(), 0.0).is_err());
        assert!(StreamInfo::new("c", DeviceProfile::wired(), 0.0013).is_err());
    }

    #[test]
    fn duplicate_and_unknown_ids() {
        let hub = Hub::new();
        let _o = hub.open_outlet(info("eeg")).unwrap();
        assert!(hub.open_outlet(info("eeg")).is_err());
        assert!(hub.subscribe("nope").is_err());
    }

    #[test]
    fn fifo_fan_out() {
        let hub = Hub::new();
        let out = hub.open_outlet(info("eeg")).unwrap();
        let a = hub.subscribe("eeg").unwrap();
        let b = hub.subscribe("eeg").unwrap();
        for k in 0..3 {
            out.push_chunk(chunk(k as f64 * 0.1)).unwrap();
        }
        let ta: Vec<_> = a.drain().iter().map(|c| c.timestamp_s).collect();
        let tb: Vec<_> = b.drain().iter().map(|c| c.timestamp_s).collect();
        assert_eq!(ta, vec![0.0, 0.1, 0.2]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn push_validation() {
        let hub = Hub::new();
        let out = hub.open_outlet(info("eeg")).unwrap();
        out.push_chunk(chunk(1.0)).unwrap();
        assert!(out.push_chunk(chunk(0.5)).is_err());
        assert!(out.push_chunk(chunk(1.0)).is_err());
        assert!(out.push_chunk(Chunk::zeros(2.0, 11, 25)).is_err());
    }

    #[test]
    fn push_without_subscribers_is_retained() {
        let hub = Hub::new();
        let out = hub.open_outlet_with_retention(info("eeg"), 2).unwrap();
        for k in 0..3 {
            out.push_chunk(chunk(k as f64)).unwrap();
        }
        let kept: Vec<_> = out.retained().iter().map(|c| c.timestamp_s).collect();
        assert_eq!(kept, vec![1.0, 2.0]);
        // late subscribers only see later chunks
        let late = hub.subscribe("eeg").unwrap();
        assert!(late.try_pull().is_none());
    }

    #[test]
    fn drop_oldest_keeps_tail() {
        let hub = Hub::new();
        let out = hub.open_outlet(info("eeg")).unwrap();
        let inlet = hub
            .subscribe_with_policy("eeg", DropPolicy::DropOldest { capacity: 4 })
            .unwrap();
        for k in 0..10 {
            out.push_chunk(chunk(k as f64)).unwrap();
        }
        let kept: Vec<_> = inlet.drain().iter().map(|c| c.timestamp_s).collect();
        assert_eq!(kept, vec![6.0, 7.0, 8.0, 9.0]);
        assert_eq!(inlet.dropped(), 6);
    }

    #[test]
    fn closing_outlet_ends_inlets() {
        let hub = Hub::new();
        let out = hub.open_outlet(info("eeg")).unwrap();
        let inlet = hub.subscribe("eeg").unwrap();
        out.push_chunk(chunk(0.0)).unwrap();
        drop(out);
        assert!(inlet.pull(Duration::from_millis(10)).unwrap().is_some());
        assert!(inlet.pull(Duration::from_millis(10)).is_err());
        assert!(hub.stream_ids().is_empty());
    }
}
