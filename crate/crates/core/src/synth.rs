//! Class-conditioned synthetic EEG.
//!
//! Each subject owns a random mixing matrix from latent sources to
//! electrodes and a set of class templates (sinusoidal source components on a
//! 0.5 Hz grid). A label selects the active template; the electrode signal is
//! `mixing · sources + 1/f noise + line noise`, in volts.
//!
//! Every command class carries two components: one at a population-wide
//! frequency shared by all subjects and one at a frequency drawn per subject.
//! A model pre-trained on many subjects can only rely on the first; a model
//! fine-tuned on one subject can use both.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{Chunk, ClassLabel, DeviceProfile, Epoch};

const MICROVOLT: f64 = 1e-6;
pub const N_SOURCES: usize = 8;
const ALPHA_SOURCE: usize = 0;
const TRAIT_SOURCE: usize = 1;
/// Population frequencies of the shared command components, C1..C4.
pub const POPULATION_FREQUENCIES_HZ: [f64; 4] = [5.0, 7.5, 17.0, 23.5];
const SUBJECT_BAND_HZ: (f64, f64) = (3.0, 40.0);
/// Corner frequencies of the AR(1) bank that approximates 1/f noise.
const NOISE_CORNERS_HZ: [f64; 8] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// RMS of the per-electrode background noise, µV.
    pub noise_level_uv: f64,
    /// Spectral exponent β of the `1/f^β` background.
    pub noise_exponent: f64,
    /// Amplitude of the 60 Hz mains component, µV.
    pub line_noise_uv: f64,
    /// Amplitude of the shared command component, µV.
    pub population_amplitude_uv: f64,
    /// Amplitude of the subject-specific command component, µV.
    pub subject_amplitude_uv: f64,
    /// Resting alpha amplitude, µV. Commands attenuate it by half.
    pub alpha_amplitude_uv: f64,
    /// Amplitude of the subject's trait rhythm present in every state, µV.
    pub trait_amplitude_uv: f64,
    /// Trial-to-trial amplitude jitter, as a fraction.
    pub amplitude_jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_level_uv: 10.0,
            noise_exponent: 1.0,
            line_noise_uv: 5.0,
            population_amplitude_uv: 6.0,
            subject_amplitude_uv: 10.0,
            alpha_amplitude_uv: 10.0,
            trait_amplitude_uv: 6.0,
            amplitude_jitter: 0.2,
        }
    }
}

impl SynthParams {
    /// Default templates with background and mains noise switched off.
    pub fn noise_free() -> Self {
        Self {
            noise_level_uv: 0.0,
            line_noise_uv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.noise_level_uv,
            self.noise_exponent,
            self.line_noise_uv,
            self.population_amplitude_uv,
            self.subject_amplitude_uv,
            self.alpha_amplitude_uv,
            self.trait_amplitude_uv,
            self.amplitude_jitter,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.amplitude_jitter >= 1.0 {
            return Err(Error::Config(format!("invalid synthetic parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceComponent {
    pub source: usize,
    pub frequency_hz: f64,
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub label: ClassLabel,
    pub components: Vec<SourceComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub subject_id: String,
    pub seed: u64,
    pub n_channels: usize,
    pub sampling_rate_hz: u32,
    /// Row-major `[n_channels][N_SOURCES]`.
    pub mixing: Vec<f64>,
    /// Indexed by [`ClassLabel::index`].
    pub templates: Vec<ClassTemplate>,
    pub noise_exponent: f64,
    pub noise_level_uv: f64,
    pub line_noise_uv: f64,
    pub amplitude_jitter: f64,
}

fn snap(f: f64) -> f64 {
    (f * 2.0).round() / 2.0
}

/// Stable 64-bit seed from a string and a salt.
pub fn derive_seed(text: &str, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(salt.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Conventional identifier of the `index`-th synthetic subject.
pub fn subject_name(index: usize) -> String {
    format!("S{:02}", index + 1)
}

impl SubjectModel {
    pub fn new(
        subject_id: impl Into<String>,
        seed: u64,
        profile: &DeviceProfile,
        params: &SynthParams,
    ) -> Result<Self> {
        profile.validate()?;
        params.validate()?;
        let subject_id = subject_id.into();
        let n_channels = profile.n_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixing: Vec<f64> = (0..n_channels * N_SOURCES)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        let alpha_f = snap(rng.gen_range(9.0..=11.5));
        let trait_f = snap(rng.gen_range(13.0..=30.0));
        let pop: Vec<f64> = POPULATION_FREQUENCIES_HZ
            .iter()
            .map(|&f| f + 0.5 * rng.gen_range(-1i32..=1) as f64)
            .collect();
        // Subject-specific command frequencies: distinct, away from every
        // shared rhythm and from each other.
        let mut taken: Vec<f64> = vec![alpha_f, trait_f];
        taken.extend(POPULATION_FREQUENCIES_HZ);
        let mut specific = Vec::with_capacity(4);
        while specific.len() < 4 {
            let f = snap(rng.gen_range(SUBJECT_BAND_HZ.0..SUBJECT_BAND_HZ.1));
            if taken.iter().all(|t| (t - f).abs() >= 1.5) {
                taken.push(f);
                specific.push(f);
            }
        }
        let specific_sources: Vec<usize> = (0..4).map(|_| rng.gen_range(2..N_SOURCES)).collect();

        let alpha = |scale: f64| SourceComponent {
            source: ALPHA_SOURCE,
            frequency_hz: alpha_f,
            amplitude_uv: params.alpha_amplitude_uv * scale,
        };
        let trait_rhythm = SourceComponent {
            source: TRAIT_SOURCE,
            frequency_hz: trait_f,
            amplitude_uv: params.trait_amplitude_uv,
        };
        let templates = ClassLabel::ALL
            .iter()
            .map(|&label| {
                let mut components = vec![trait_rhythm];
                if label.is_command() {
                    let k = label.index();
                    components.push(alpha(0.5));
                    components.push(SourceComponent {
                        source: 2 + k,
                        frequency_hz: pop[k],
                        amplitude_uv: params.population_amplitude_uv,
                    });
                    components.push(SourceComponent {
                        source: specific_sources[k],
                        frequency_hz: specific[k],
                        amplitude_uv: params.subject_amplitude_uv,
                    });
                } else {
                    components.push(alpha(1.0));
                }
                components.retain(|c| c.amplitude_uv > 0.0);
                ClassTemplate { label, components }
            })
            .collect();

        Ok(Self {
            subject_id,
            seed,
            n_channels,
            sampling_rate_hz: profile.sampling_rate_hz,
            mixing,
            templates,
            noise_exponent: params.noise_exponent,
            noise_level_uv: params.noise_level_uv,
            line_noise_uv: params.line_noise_uv,
            amplitude_jitter: params.amplitude_jitter,
        })
    }

    /// The `index`-th member of a synthetic population rooted at `seed`.
    pub fn population_member(
        index: usize,
        seed: u64,
        profile: &DeviceProfile,
        params: &SynthParams,
    ) -> Result<Self> {
        let id = subject_name(index);
        Self::new(id.clone(), derive_seed(&id, seed), profile, params)
    }

    pub fn template(&self, label: ClassLabel) -> &ClassTemplate {
        &self.templates[label.index()]
    }

    pub fn mixing_at(&self, channel: usize, source: usize) -> f64 {
        self.mixing[channel * N_SOURCES + source]
    }

    /// Numerical column rank of the mixing matrix (modified Gram-Schmidt).
    pub fn mixing_rank(&self) -> usize {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for s in 0..N_SOURCES {
            let mut v: Vec<f64> = (0..self.n_channels).map(|c| self.mixing_at(c, s)).collect();
            let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 * norm0.max(1.0) {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        basis.len()
    }

    /// L1 distance between the per-frequency source power of two templates.
    pub fn spectral_distance(&self, a: ClassLabel, b: ClassLabel) -> f64 {
        let power = |label: ClassLabel| {
            let mut m: Vec<(i64, f64)> = Vec::new();
            for c in &self.template(label).components {
                let key = (c.frequency_hz * 2.0).round() as i64;
                match m.iter_mut().find(|(k, _)| *k == key) {
                    Some(e) => e.1 += c.amplitude_uv * c.amplitude_uv,
                    None => m.push((key, c.amplitude_uv * c.amplitude_uv)),
                }
            }
            m
        };
        let (pa, pb) = (power(a), power(b));
        let mut d = 0.0;
        for (k, v) in &pa {
            d += (v - pb.iter().find(|(kb, _)| kb == k).map_or(0.0, |e| e.1)).abs();
        }
        for (k, v) in &pb {
            if !pa.iter().any(|(ka, _)| ka == k) {
                d += v;
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
struct ActiveComponent {
    source: usize,
    omega: f64,
    amplitude: f64,
    phase: f64,
}

/// Streaming generator for one subject. Label changes take effect at the
/// next sample with freshly drawn phases and amplitudes; the noise processes
/// run on uninterrupted.
#[derive(Debug, Clone)]
pub struct SynthStream {
    subject: SubjectModel,
    rng: ChaCha8Rng,
    label: ClassLabel,
    active: Vec<ActiveComponent>,
    sample_index: u64,
    start_timestamp_s: f64,
    noise_poles: Vec<f64>,
    noise_gains: Vec<f64>,
    noise_state: Vec<f64>,
    line_phase: f64,
}

impl SynthStream {
    pub fn new(subject: SubjectModel, seed: u64, initial: ClassLabel) -> Self {
        let fs = subject.sampling_rate_hz as f64;
        let beta = subject.noise_exponent;
        let poles: Vec<f64> = NOISE_CORNERS_HZ.iter().map(|fc| (-2.0 * PI * fc / fs).exp()).collect();
        let raw: Vec<f64> = NOISE_CORNERS_HZ
            .iter()
            .zip(&poles)
            .map(|(fc, a)| (1.0 - a) * fc.powf(-beta / 2.0))
            .collect();
        let variance: f64 = raw.iter().zip(&poles).map(|(g, a)| g * g / (1.0 - a * a)).sum();
        let norm = subject.noise_level_uv * MICROVOLT / variance.sqrt();
        let gains: Vec<f64> = raw.iter().map(|g| g * norm).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e3e6);
        let k = NOISE_CORNERS_HZ.len();
        let mut state = vec![0.0; subject.n_channels * k];
        if subject.noise_level_uv > 0.0 {
            for ch in 0..subject.n_channels {
                for j in 0..k {
                    let sd = gains[j] / (1.0 - poles[j] * poles[j]).sqrt();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    state[ch * k + j] = sd * z;
                }
            }
        }
        let line_phase = rng.gen_range(0.0..2.0 * PI);
        let mut s = Self {
            subject,
            rng,
            label: initial,
            active: Vec::new(),
            sample_index: 0,
            start_timestamp_s: 0.0,
            noise_poles: poles,
            noise_gains: gains,
            noise_state: state,
            line_phase,
        };
        s.activate(initial);
        s
    }

    pub fn with_start_timestamp(mut self, t0: f64) -> Self {
        self.start_timestamp_s = t0;
        self
    }

    pub fn subject(&self) -> &SubjectModel {
        &self.subject
    }

    pub fn label(&self) -> ClassLabel {
        self.label
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    /// Stream-clock time of the next sample to be generated.
    pub fn next_timestamp_s(&self) -> f64 {
        self.start_timestamp_s + self.sample_index as f64 / self.subject.sampling_rate_hz as f64
    }

    fn activate(&mut self, label: ClassLabel) {
        let fs = self.subject.sampling_rate_hz as f64;
        let jitter = self.subject.amplitude_jitter;
        let comps = self.subject.templates[label.index()].components.clone();
        self.active = comps
            .iter()
            .map(|c| {
                let scale = if jitter > 0.0 {
                    self.rng.gen_range(1.0 - jitter..=1.0 + jitter)
                } else {
                    1.0
                };
                ActiveComponent {
                    source: c.source,
                    omega: 2.0 * PI * c.frequency_hz / fs,
                    amplitude: c.amplitude_uv * MICROVOLT * scale,
                    phase: self.rng.gen_range(0.0..2.0 * PI),
                }
            })
            .collect();
        self.label = label;
    }

    /// Starts a new segment with `label` (phases and amplitudes redrawn).
    pub fn set_label(&mut self, label: ClassLabel) {
        self.activate(label);
    }

    /// Generates the next `n_samples` samples for every channel.
    pub fn next_chunk(&mut self, n_samples: usize) -> Chunk {
        let c = self.subject.n_channels;
        let k = NOISE_CORNERS_HZ.len();
        let fs = self.subject.sampling_rate_hz as f64;
        let line_omega = 2.0 * PI * 60.0 / fs;
        let line_amp = self.subject.line_noise_uv * MICROVOLT;
        let noisy = self.subject.noise_level_uv > 0.0;
        let timestamp = self.next_timestamp_s();
        let mut data = vec![0.0f32; c * n_samples];
        let mut sources = [0.0f64; N_SOURCES];
        for i in 0..n_samples {
            let n = (self.sample_index + i as u64) as f64;
            sources.iter_mut().for_each(|s| *s = 0.0);
            for a in &self.active {
                sources[a.source] += a.amplitude * (a.omega * n + a.phase).sin();
            }
            let line = line_amp * (line_omega * n + self.line_phase).sin();
            for ch in 0..c {
                let row = &self.subject.mixing[ch * N_SOURCES..(ch + 1) * N_SOURCES];
                let mut v: f64 = row.iter().zip(&sources).map(|(m, s)| m * s).sum();
                v += line;
                if noisy {
                    let st = &mut self.noise_state[ch * k..(ch + 1) * k];
                    for j in 0..k {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        st[j] = self.noise_poles[j] * st[j] + self.noise_gains[j] * z;
                        v += st[j];
                    }
                }
                data[ch * n_samples + i] = v as f32;
            }
        }
        self.sample_index += n_samples as u64;
        Chunk {
            timestamp_s: timestamp,
            n_channels: c,
            data,
        }
    }
}

/// One labelled epoch drawn from a fresh stream; deterministic in
/// `(subject, label, duration_s, seed)`.
pub fn generate_epoch(subject: &SubjectModel, label: ClassLabel, duration_s: f64, seed: u64) -> Result<Epoch> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::Config(format!("epoch duration must be positive, got {duration_s}")));
    }
    let n = (duration_s * subject.sampling_rate_hz as f64).round() as usize;
    if n == 0 {
        return Err(Error::Config(format!("duration {duration_s} s yields no samples")));
    }
    let mut stream = SynthStream::new(subject.clone(), seed, label);
    let chunk = stream.next_chunk(n);
    Epoch::new(subject.n_channels, chunk.data, Some(label), Some(subject.subject_id.clone()))
}

/// Balanced labelled set: `per_class` epochs for every label in `labels`,
/// interleaved by trial, each with its own seed.
pub fn generate_dataset(
    subject: &SubjectModel,
    labels: &[ClassLabel],
    per_class: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<Epoch>> {
    let mut out = Vec::with_capacity(labels.len() * per_class);
    for trial in 0..per_class {
        for &label in labels {
            let s = derive_seed(&subject.subject_id, seed ^ ((trial as u64) << 8 | label.index() as u64));
            out.push(generate_epoch(subject, label, duration_s, s)?);
        }
    }
    Ok(out)
}
