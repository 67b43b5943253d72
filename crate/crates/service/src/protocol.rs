//! Telemetry wire format: each message is a big-endian `u32` byte length
//! followed by a JSON object carrying `protocol_version` and `type`.

use std::io::{self, Read, Write};

use ispeech_core::{ClassLabel, IntentDistribution};
use serde::{Deserialize, Serialize};

use crate::state::SessionState;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEvent {
    pub end_timestamp_s: f64,
    pub distribution: IntentDistribution,
    /// Absent for REST or low confidence.
    pub emitted_command: Option<ClassLabel>,
    /// Set when the command repeats one shown less than the debounce
    /// interval ago; the UI does not show it again.
    pub debounced: bool,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFrame {
    /// Stream time of the first sample.
    pub timestamp_s: f64,
    pub sampling_rate_hz: f64,
    pub n_channels: usize,
    /// Row-major `[n_channels][n_samples]`, preprocessed units.
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TelemetryMessage {
    SignalFrame(SignalFrame),
    StateChange {
        state: SessionState,
    },
    InferenceEvent(InferenceEvent),
    CalibrationPrompt {
        trial_idx: usize,
        total: usize,
        label: ClassLabel,
        word: String,
        marker_s: f64,
    },
    Progress {
        phase: String,
        value: f64,
        target: f64,
    },
    Pong {
        nonce: u64,
    },
}

impl TelemetryMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            TelemetryMessage::SignalFrame(_) => "signal_frame",
            TelemetryMessage::StateChange { .. } => "state_change",
            TelemetryMessage::InferenceEvent(_) => "inference_event",
            TelemetryMessage::CalibrationPrompt { .. } => "calibration_prompt",
            TelemetryMessage::Progress { .. } => "progress",
            TelemetryMessage::Pong { .. } => "pong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub protocol_version: u32,
    #[serde(flatten)]
    pub message: TelemetryMessage,
}

impl Envelope {
    pub fn new(message: TelemetryMessage) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            message,
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("telemetry serializes")
    }

    /// Parses a payload, rejecting other protocol versions.
    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let version = v
            .get("protocol_version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| ProtocolError::Malformed("missing protocol_version".into()))?;
        if version != PROTOCOL_VERSION as u64 {
            return Err(ProtocolError::Version(version));
        }
        serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

/// Messages a telemetry client may send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello { protocol_version: u32 },
    Ping { nonce: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("unsupported protocol version {0}")]
    Version(u64),
    #[error("malformed message: {0}")]
    Malformed(String),
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)
}

/// Next frame payload; `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {n} bytes")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}
