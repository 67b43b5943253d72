//! Append-only JSON-lines session log, one record per line, and replay of
//! its live segments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ispeech_core::{Chunk, DecoderModel, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::live::{LiveConfig, LiveLoop};
use crate::protocol::{InferenceEvent, PROTOCOL_VERSION};
use crate::state::SessionState;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        log_version: u32,
        protocol_version: u32,
        created_at: f64,
        config: serde_json::Value,
    },
    StateChange {
        stream_time_s: Option<f64>,
        state: SessionState,
    },
    /// Start of a live segment; the loop starts from a fresh filter and
    /// buffer.
    LiveStart {
        checkpoint_path: String,
        checkpoint_sha256: String,
        model_config_sha256: String,
        sampling_rate_hz: u32,
        live_config: LiveConfig,
    },
    /// Raw chunk fed to the live loop; `data` is base64 of little-endian f32.
    Chunk {
        timestamp_s: f64,
        n_channels: usize,
        data: String,
    },
    Inference {
        event: InferenceEvent,
    },
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode_chunk(chunk: &Chunk) -> LogRecord {
    let bytes: Vec<u8> = chunk.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    LogRecord::Chunk {
        timestamp_s: chunk.timestamp_s,
        n_channels: chunk.n_channels,
        data: B64.encode(bytes),
    }
}

pub fn decode_chunk(timestamp_s: f64, n_channels: usize, data: &str) -> Result<Chunk> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Format(format!("chunk payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("chunk payload is not whole f32 values".into()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Chunk::new(timestamp_s, n_channels, values)
}

pub struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
    records: u64,
}

impl EventLog {
    /// Creates (truncates) `path` and writes the header.
    pub fn create(path: &Path, created_at: f64, config: serde_json::Value) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
            records: 0,
        };
        log.append(&LogRecord::Header {
            log_version: LOG_VERSION,
            protocol_version: PROTOCOL_VERSION,
            created_at,
            config,
        })?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    /// Writes one record and flushes it.
    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.records += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedLog {
    pub records: Vec<LogRecord>,
    /// A partial final line was dropped.
    pub truncated_tail: bool,
}

impl LoadedLog {
    pub fn inference_events(&self) -> Vec<&InferenceEvent> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Inference { event } => Some(event),
                _ => None,
            })
            .collect()
    }

    pub fn states(&self) -> Vec<&SessionState> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::StateChange { state, .. } => Some(state),
                _ => None,
            })
            .collect()
    }
}

/// Reads every complete record. An unparsable final line is treated as an
/// interrupted write and dropped; damage anywhere else is an error.
pub fn load_log(path: &Path) -> Result<LoadedLog> {
    let text = String::from_utf8_lossy(&std::fs::read(path)?).into_owned();
    let lines: Vec<&str> = text.split('\n').collect();
    let mut records = Vec::new();
    let mut truncated_tail = false;
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let last = i + 1 == lines.len();
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if last => truncated_tail = true,
            Err(e) => return Err(Error::Format(format!("log line {}: {e}", i + 1))),
        }
    }
    match records.first() {
        Some(LogRecord::Header { log_version, .. }) if *log_version == LOG_VERSION => {}
        Some(LogRecord::Header { log_version, .. }) => {
            return Err(Error::Format(format!("unsupported log version {log_version}")))
        }
        _ => return Err(Error::Format("log has no header".into())),
    }
    Ok(LoadedLog {
        records,
        truncated_tail,
    })
}

/// An inference event serialized without its wall-clock latency.
pub fn decision_bytes(event: &InferenceEvent) -> Vec<u8> {
    let mut e = event.clone();
    e.latency_ms = 0.0;
    serde_json::to_vec(&e).expect("event serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub segments: usize,
    pub chunks: usize,
    pub logged_events: usize,
    pub replayed_events: usize,
    /// Index of the first event whose decision differs.
    pub first_mismatch: Option<usize>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.first_mismatch.is_none() && self.logged_events == self.replayed_events
    }
}

/// Re-runs every live segment of the log from its logged chunks with the
/// logged checkpoint and compares the decisions with the logged events.
pub fn replay(log: &LoadedLog) -> Result<ReplayReport> {
    let mut report = ReplayReport {
        segments: 0,
        chunks: 0,
        logged_events: 0,
        replayed_events: 0,
        first_mismatch: None,
    };
    let mut logged: Vec<Vec<u8>> = Vec::new();
    let mut replayed: Vec<Vec<u8>> = Vec::new();
    let mut live: Option<LiveLoop> = None;
    for r in &log.records {
        match r {
            LogRecord::LiveStart {
                checkpoint_path,
                checkpoint_sha256,
                sampling_rate_hz,
                live_config,
                ..
            } => {
                let bytes = std::fs::read(checkpoint_path)?;
                if &sha256_hex(&bytes) != checkpoint_sha256 {
                    return Err(Error::Format(format!("checkpoint {checkpoint_path} changed since the session")));
                }
                let model = DecoderModel::load(Path::new(checkpoint_path))?;
                live = Some(LiveLoop::new(Arc::new(model), *sampling_rate_hz, live_config.clone())?);
                report.segments += 1;
            }
            LogRecord::Chunk {
                timestamp_s,
                n_channels,
                data,
            } => {
                let lp = live
                    .as_mut()
                    .ok_or_else(|| Error::Format("chunk record outside a live segment".into()))?;
                report.chunks += 1;
                if let Some(ev) = lp.tick(&decode_chunk(*timestamp_s, *n_channels, data)?, None)?.event {
                    replayed.push(decision_bytes(&ev));
                }
            }
            LogRecord::Inference { event } => logged.push(decision_bytes(event)),
            LogRecord::StateChange { state, .. } if *state != SessionState::Live => live = None,
            _ => {}
        }
    }
    report.logged_events = logged.len();
    report.replayed_events = replayed.len();
    report.first_mismatch = logged.iter().zip(&replayed).position(|(a, b)| a != b);
    if report.first_mismatch.is_none() && logged.len() != replayed.len() {
        report.first_mismatch = Some(logged.len().min(replayed.len()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_session_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        drop(EventLog::create(&p, 0.0, serde_json::json!({})).unwrap());
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        let log = load_log(&p).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(!log.truncated_tail);
    }

    #[test]
    fn truncated_tail_recovers_complete_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let mut log = EventLog::create(&p, 0.0, serde_json::json!({})).unwrap();
        for _ in 0..3 {
            log.append(&LogRecord::StateChange {
                stream_time_s: None,
                state: SessionState::Idle,
            })
            .unwrap();
        }
        drop(log);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&p, &bytes).unwrap();
        let log = load_log(&p).unwrap();
        assert_eq!(log.records.len(), 3);
        assert!(log.truncated_tail);
    }

    #[test]
    fn chunk_encoding_is_exact() {
        let c = Chunk::new(1.5, 2, vec![1e-6, -3.25, f32::MIN_POSITIVE, 7.0]).unwrap();
        let LogRecord::Chunk {
            timestamp_s,
            n_channels,
            data,
        } = encode_chunk(&c)
        else {
            unreachable!()
        };
        assert_eq!(decode_chunk(timestamp_s, n_channels, &data).unwrap(), c);
    }
}
