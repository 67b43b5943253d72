//! EEG domain types and the two preprocessing transforms: a 60 Hz notch and
//! amplitude rescaling.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier applied to raw volt-scale samples before they reach the model.
pub const AMPLITUDE_SCALE: f64 = 1e4;
pub const NOTCH_FREQUENCY_HZ: f64 = 60.0;
pub const NOTCH_Q: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelRole {
    Eeg,
    Eog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub role: ChannelRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub sampling_rate_hz: u32,
    pub channels: Vec<ChannelSpec>,
}

const WIRED_CHANNELS: [&str; 32] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4",
    "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3", "Pz", "P4", "P8", "PO9", "O1",
    "Oz", "O2", "PO10",
];
const EOG_CHANNELS: [&str; 2] = ["TP9", "TP10"];
const WIRELESS_CHANNELS: [&str; 12] = [
    "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8",
];

impl DeviceProfile {
    pub const WIRED: &'static str = "wired";
    pub const WIRELESS: &'static str = "wireless";

    /// 32-channel amplifier montage: 30 scalp EEG plus TP9/TP10 as EOG.
    pub fn wired() -> Self {
        Self {
            name: Self::WIRED.into(),
            sampling_rate_hz: 250,
            channels: WIRED_CHANNELS
                .iter()
                .map(|&name| ChannelSpec {
                    name: name.into(),
                    role: if EOG_CHANNELS.contains(&name) {
                        ChannelRole::Eog
                    } else {
                        ChannelRole::Eeg
                    },
                })
                .collect(),
        }
    }

    /// 12-channel consumer headset, simulated at 250 Hz.
    pub fn wireless() -> Self {
        Self {
            name: Self::WIRELESS.into(),
            sampling_rate_hz: 250,
            channels: WIRELESS_CHANNELS
                .iter()
                .map(|&name| ChannelSpec {
                    name: name.into(),
                    role: ChannelRole::Eeg,
                })
                .collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            Self::WIRED => Ok(Self::wired()),
            Self::WIRELESS => Ok(Self::wireless()),
            other => Err(Error::Config(format!("unknown device profile `{other}`"))),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_rate_hz == 0 {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("profile has no channels".into()));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.name.as_str()) {
                return Err(Error::Config(format!("duplicate channel name `{}`", ch.name)));
            }
            if ch.role == ChannelRole::Eog && !EOG_CHANNELS.contains(&ch.name.as_str()) {
                return Err(Error::Config(format!(
                    "channel `{}` cannot carry the EOG role",
                    ch.name
                )));
            }
        }
        Ok(())
    }
}

/// Four imagined-speech commands plus the non-command rest state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "C1")]
    HelpMe,
    #[serde(rename = "C2")]
    TellMe,
    #[serde(rename = "C3")]
    Bored,
    #[serde(rename = "C4")]
    Tired,
    #[serde(rename = "REST")]
    Rest,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::HelpMe,
        ClassLabel::TellMe,
        ClassLabel::Bored,
        ClassLabel::Tired,
        ClassLabel::Rest,
    ];
    pub const COMMANDS: [ClassLabel; 4] = [
        ClassLabel::HelpMe,
        ClassLabel::TellMe,
        ClassLabel::Bored,
        ClassLabel::Tired,
    ];

    /// Class index used by the decoder's intent head.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn is_command(self) -> bool {
        self != ClassLabel::Rest
    }

    /// Short code: C1..C4 or REST.
    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::HelpMe => "C1",
            ClassLabel::TellMe => "C2",
            ClassLabel::Bored => "C3",
            ClassLabel::Tired => "C4",
            ClassLabel::Rest => "REST",
        }
    }

    /// The cue word shown to the user.
    pub fn word(self) -> &'static str {
        match self {
            ClassLabel::HelpMe => "help me",
            ClassLabel::TellMe => "tell me",
            ClassLabel::Bored => "bored",
            ClassLabel::Tired => "tired",
            ClassLabel::Rest => "rest",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| Error::Data(format!("unknown class label `{code}`")))
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// Timestamped block of samples, row-major `[n_channels][n_samples]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub timestamp_s: f64,
    pub n_channels: usize,
    pub data: Vec<f32>,
}

impl Chunk {
    pub fn new(timestamp_s: f64, n_channels: usize, data: Vec<f32>) -> Result<Self> {
        if n_channels == 0 || data.is_empty() || data.len() % n_channels != 0 {
            return Err(Error::Data(format!(
                "chunk of {} values does not split into {n_channels} non-empty channels",
                data.len()
            )));
        }
        if !timestamp_s.is_finite() {
            return Err(Error::Data("chunk timestamp is not finite".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at flat index {pos}")));
        }
        Ok(Self {
            timestamp_s,
            n_channels,
            data,
        })
    }

    pub fn zeros(timestamp_s: f64, n_channels: usize, n_samples: usize) -> Self {
        Self {
            timestamp_s,
            n_channels,
            data: vec![0.0; n_channels * n_samples],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.len() / self.n_channels.max(1)
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.n_samples();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.n_samples();
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

/// Fixed-length, optionally labelled segment `[n_channels][n_samples]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub n_channels: usize,
    pub n_samples: usize,
    pub data: Vec<f32>,
    pub label: Option<ClassLabel>,
    pub subject_id: Option<String>,
}

impl Epoch {
    pub fn new(
        n_channels: usize,
        data: Vec<f32>,
        label: Option<ClassLabel>,
        subject_id: Option<String>,
    ) -> Result<Self> {
        if n_channels == 0 || data.is_empty() || data.len() % n_channels != 0 {
            return Err(Error::Data(format!(
                "epoch of {} values does not split into {n_channels} channels",
                data.len()
            )));
        }
        Ok(Self {
            n_channels,
            n_samples: data.len() / n_channels,
            data,
            label,
            subject_id,
        })
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }
}

/// Biquad coefficients normalised so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Cookbook notch at `f0` with quality factor `q`.
    pub fn notch(f0_hz: f64, q: f64, sampling_rate_hz: f64) -> Self {
        let w0 = 2.0 * PI * f0_hz / sampling_rate_hz;
        let alpha = w0.sin() / (2.0 * q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b0: 1.0 / a0,
            b1: -2.0 * cos / a0,
            b2: 1.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// |H(e^{jw})| at frequency `f_hz`.
    pub fn magnitude(&self, f_hz: f64, sampling_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / sampling_rate_hz;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num_re = self.b0 + self.b1 * c1 + self.b2 * c2;
        let num_im = self.b1 * s1 + self.b2 * s2;
        let den_re = 1.0 + self.a1 * c1 + self.a2 * c2;
        let den_im = self.a1 * s1 + self.a2 * s2;
        (num_re.hypot(num_im)) / (den_re.hypot(den_im))
    }
}

/// Per-channel transposed direct-form II state for the notch.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub coefficients: Biquad,
    pub sampling_rate_hz: u32,
    state: Vec<[f64; 2]>,
}

impl FilterState {
    /// Zeroed state for a fresh stream.
    pub fn new(n_channels: usize, sampling_rate_hz: u32) -> Self {
        Self {
            coefficients: Biquad::notch(NOTCH_FREQUENCY_HZ, NOTCH_Q, sampling_rate_hz as f64),
            sampling_rate_hz,
            state: vec![[0.0; 2]; n_channels],
        }
    }

    pub fn for_profile(profile: &DeviceProfile) -> Self {
        Self::new(profile.n_channels(), profile.sampling_rate_hz)
    }

    pub fn n_channels(&self) -> usize {
        self.state.len()
    }

    pub fn norm(&self) -> f64 {
        self.state
            .iter()
            .map(|s| s[0] * s[0] + s[1] * s[1])
            .sum::<f64>()
            .sqrt()
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }
}

/// Applies the 60 Hz notch to every channel, carrying state across calls so
/// that chunked filtering equals filtering the concatenated signal.
pub fn notch_filter_60hz(chunk: &Chunk, state: &mut FilterState) -> Result<Chunk> {
    if state.n_channels() != chunk.n_channels {
        return Err(Error::Config(format!(
            "filter state has {} channels, chunk has {}",
            state.n_channels(),
            chunk.n_channels
        )));
    }
    let c = state.coefficients;
    let mut out = chunk.clone();
    for ch in 0..chunk.n_channels {
        let s = &mut state.state[ch];
        for v in out.channel_mut(ch) {
            let x = *v as f64;
            let y = c.b0 * x + s[0];
            s[0] = c.b1 * x - c.a1 * y + s[1];
            s[1] = c.b2 * x - c.a2 * y;
            *v = y as f32;
        }
    }
    Ok(out)
}

/// Multiplies every sample by [`AMPLITUDE_SCALE`].
pub fn rescale_amplitude(chunk: &Chunk) -> Result<Chunk> {
    if let Some(pos) = chunk.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite sample at flat index {pos}")));
    }
    let mut out = chunk.clone();
    for v in &mut out.data {
        *v = (*v as f64 * AMPLITUDE_SCALE) as f32;
    }
    Ok(out)
}

/// Notch, then rescale. No other transform is applied.
pub fn preprocess(chunk: &Chunk, state: &mut FilterState) -> Result<Chunk> {
    let filtered = notch_filter_60hz(chunk, state)?;
    rescale_amplitude(&filtered)
}
