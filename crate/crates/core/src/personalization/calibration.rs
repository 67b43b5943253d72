use std::collections::{BTreeMap, VecDeque};
use std::ops::ControlFlow;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::EpochArchive;
use crate::error::{Error, Result};
use crate::personalization::capture::is_gap;
use crate::signal::{preprocess, Chunk, ClassLabel, Epoch, FilterState};
use crate::stream::{window_samples, Inlet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub n_per_class: usize,
    pub trial_s: f64,
    /// Rest between the end of one trial and the next prompt. The first
    /// prompt follows the first chunk after this lead-in.
    pub inter_trial_s: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_per_class: 10,
            trial_s: 2.0,
            inter_trial_s: 1.0,
            seed: 0,
        }
    }
}

/// `n_per_class` rounds, each holding the four commands in a seeded random
/// order.
pub fn prompt_schedule(n_per_class: usize, seed: u64) -> Vec<ClassLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * n_per_class);
    for _ in 0..n_per_class {
        let mut round = ClassLabel::COMMANDS;
        round.shuffle(&mut rng);
        out.extend(round);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationEvent {
    /// Cue `label`; recording starts at `marker_s`.
    Prompt {
        trial_idx: usize,
        total: usize,
        label: ClassLabel,
        marker_s: f64,
    },
    Recorded {
        trial_idx: usize,
        label: ClassLabel,
        start_s: f64,
    },
    /// The trial will be prompted again.
    Discarded {
        trial_idx: usize,
        label: ClassLabel,
        reason: String,
    },
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedTrial {
    pub trial_idx: usize,
    pub start_s: f64,
    pub epoch: Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub trials: Vec<RecordedTrial>,
    pub n_per_class: usize,
    pub sampling_rate_hz: u32,
}

impl CalibrationSet {
    pub fn counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut m = BTreeMap::new();
        for t in &self.trials {
            if let Some(l) = t.epoch.label {
                *m.entry(l).or_insert(0) += 1;
            }
        }
        m
    }

    /// Exactly `n_per_class` epochs of every command.
    pub fn is_complete(&self) -> bool {
        let c = self.counts();
        c.len() == ClassLabel::COMMANDS.len()
            && ClassLabel::COMMANDS.iter().all(|l| c.get(l) == Some(&self.n_per_class))
    }

    pub fn epochs(&self) -> Vec<Epoch> {
        self.trials.iter().map(|t| t.epoch.clone()).collect()
    }

    pub fn to_archive(&self) -> Result<EpochArchive> {
        EpochArchive::new(self.sampling_rate_hz, self.epochs())
    }
}

#[derive(Debug, Clone)]
enum Phase {
    Waiting { until_s: f64 },
    Recording { label: ClassLabel, start_s: f64, data: Vec<Vec<f32>> },
    Done,
}

/// Chunk-driven calibration protocol. Feed preprocessed chunks; prompts are
/// issued at chunk boundaries and each trial records the `trial_s` seconds
/// that follow its prompt marker.
#[derive(Debug, Clone)]
pub struct CalibrationRecorder {
    n_channels: usize,
    sampling_rate_hz: u32,
    trial_samples: usize,
    config: CalibrationConfig,
    total: usize,
    pending: VecDeque<ClassLabel>,
    phase: Option<Phase>,
    next_timestamp_s: Option<f64>,
    trials: Vec<RecordedTrial>,
    pub discarded: usize,
}

impl CalibrationRecorder {
    pub fn new(n_channels: usize, sampling_rate_hz: u32, config: CalibrationConfig) -> Result<Self> {
        if config.n_per_class == 0 || !(config.trial_s > 0.0) || !(config.inter_trial_s >= 0.0) {
            return Err(Error::Config("calibration needs trials and a positive trial length".into()));
        }
        let schedule = prompt_schedule(config.n_per_class, config.seed);
        Ok(Self {
            n_channels,
            sampling_rate_hz,
            trial_samples: window_samples(config.trial_s, sampling_rate_hz),
            total: schedule.len(),
            pending: schedule.into(),
            config,
            phase: None,
            next_timestamp_s: None,
            trials: Vec::new(),
            discarded: 0,
        })
    }

    pub fn total_trials(&self) -> usize {
        self.total
    }

    pub fn recorded(&self) -> usize {
        self.trials.len()
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.phase, Some(Phase::Done))
    }

    /// The label being recorded, with its trial index.
    pub fn current_trial(&self) -> Option<(usize, ClassLabel)> {
        match &self.phase {
            Some(Phase::Recording { label, .. }) => Some((self.trials.len(), *label)),
            _ => None,
        }
    }

    fn prompt(&mut self, marker_s: f64, events: &mut Vec<CalibrationEvent>) {
        match self.pending.pop_front() {
            Some(label) => {
                events.push(CalibrationEvent::Prompt {
                    trial_idx: self.trials.len(),
                    total: self.total,
                    label,
                    marker_s,
                });
                self.phase = Some(Phase::Recording {
                    label,
                    start_s: marker_s,
                    data: vec![Vec::with_capacity(self.trial_samples); self.n_channels],
                });
            }
            None => {
                self.phase = Some(Phase::Done);
                events.push(CalibrationEvent::Complete);
            }
        }
    }

    pub fn push(&mut self, chunk: &Chunk) -> Result<Vec<CalibrationEvent>> {
        if chunk.n_channels != self.n_channels {
            return Err(Error::Config(format!(
                "chunk has {} channels, calibration expects {}",
                chunk.n_channels, self.n_channels
            )));
        }
        let mut events = Vec::new();
        let rate = self.sampling_rate_hz as f64;
        let n = chunk.n_samples();
        let end_s = chunk.timestamp_s + n as f64 / rate;
        let gap = self
            .next_timestamp_s
            .is_some_and(|t| is_gap(t, chunk.timestamp_s, self.sampling_rate_hz));
        self.next_timestamp_s = Some(end_s);

        let phase = self.phase.take().unwrap_or(Phase::Waiting {
            until_s: chunk.timestamp_s + self.config.inter_trial_s,
        });
        self.phase = Some(match phase {
            Phase::Done => Phase::Done,
            Phase::Recording { label, .. } if gap => {
                self.discarded += 1;
                self.pending.push_front(label);
                events.push(CalibrationEvent::Discarded {
                    trial_idx: self.trials.len(),
                    label,
                    reason: format!("stream gap before {:.3} s", chunk.timestamp_s),
                });
                Phase::Waiting {
                    until_s: chunk.timestamp_s + self.config.inter_trial_s,
                }
            }
            Phase::Recording {
                label,
                start_s,
                mut data,
            } => {
                // Samples at or after the marker.
                let skip = (((start_s - chunk.timestamp_s) * rate).round().max(0.0) as usize).min(n);
                let take = (self.trial_samples - data[0].len()).min(n - skip);
                for (ch, d) in data.iter_mut().enumerate() {
                    d.extend_from_slice(&chunk.channel(ch)[skip..skip + take]);
                }
                if data[0].len() == self.trial_samples {
                    let trial_idx = self.trials.len();
                    let epoch = Epoch {
                        n_channels: self.n_channels,
                        n_samples: self.trial_samples,
                        data: data.concat(),
                        label: Some(label),
                        subject_id: None,
                    };
                    self.trials.push(RecordedTrial {
                        trial_idx,
                        start_s,
                        epoch,
                    });
                    events.push(CalibrationEvent::Recorded {
                        trial_idx,
                        label,
                        start_s,
                    });
                    Phase::Waiting {
                        until_s: start_s + self.config.trial_s + self.config.inter_trial_s,
                    }
                } else {
                    Phase::Recording { label, start_s, data }
                }
            }
            w @ Phase::Waiting { .. } => w,
        });
        if let Some(Phase::Waiting { until_s }) = self.phase {
            if end_s >= until_s - 0.5 / rate {
                self.prompt(end_s, &mut events);
            }
        }
        Ok(events)
    }

    /// The trials recorded so far; the set is incomplete when stopped early.
    pub fn finish(self) -> CalibrationSet {
        CalibrationSet {
            trials: self.trials,
            n_per_class: self.config.n_per_class,
            sampling_rate_hz: self.sampling_rate_hz,
        }
    }
}

/// Runs the protocol on raw chunks pulled from `inlet`. `on_event` sees every
/// event as it happens and may break to abort, which returns the partial set.
pub fn run_calibration<F>(
    inlet: &Inlet,
    config: CalibrationConfig,
    timeout: Duration,
    mut on_event: F,
) -> Result<CalibrationSet>
where
    F: FnMut(&CalibrationEvent) -> ControlFlow<()>,
{
    let profile = &inlet.info().profile;
    let mut rec = CalibrationRecorder::new(profile.n_channels(), profile.sampling_rate_hz, config)?;
    let mut filter = FilterState::for_profile(profile);
    while !rec.is_complete() {
        let chunk = match inlet.pull(timeout)? {
            Some(c) => c,
            None => return Err(Error::Stream(format!("no chunk within {timeout:?} during calibration"))),
        };
        for ev in rec.push(&preprocess(&chunk, &mut filter)?)? {
            if on_event(&ev).is_break() {
                return Ok(rec.finish());
            }
        }
    }
    Ok(rec.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_chunk(i: usize) -> Chunk {
        // value = global sample index
        let data = (0..25).map(|s| (i * 25 + s) as f32).collect();
        Chunk::new(i as f64 * 0.1, 1, data).unwrap()
    }

    fn run(rec: &mut CalibrationRecorder, chunks: impl Iterator<Item = Chunk>) -> Vec<CalibrationEvent> {
        let mut ev = Vec::new();
        for c in chunks {
            ev.extend(rec.push(&c).unwrap());
            if rec.is_complete() {
                break;
            }
        }
        ev
    }

    #[test]
    fn schedule_is_balanced() {
        let s = prompt_schedule(10, 4);
        assert_eq!(s.len(), 40);
        for l in ClassLabel::COMMANDS {
            assert_eq!(s.iter().filter(|&&x| x == l).count(), 10);
        }
        assert_eq!(s, prompt_schedule(10, 4));
        assert_ne!(s, prompt_schedule(10, 5));
    }

    #[test]
    fn full_run_records_forty_aligned_epochs() {
        let mut rec = CalibrationRecorder::new(1, 250, CalibrationConfig::default()).unwrap();
        let ev = run(&mut rec, (0..10_000).map(ramp_chunk));
        assert!(matches!(ev.last(), Some(CalibrationEvent::Complete)));
        let prompts: Vec<f64> = ev
            .iter()
            .filter_map(|e| match e {
                CalibrationEvent::Prompt { marker_s, .. } => Some(*marker_s),
                _ => None,
            })
            .collect();
        assert_eq!(prompts.len(), 40);
        let set = rec.finish();
        assert!(set.is_complete());
        assert_eq!(set.trials.len(), 40);
        for (t, &m) in set.trials.iter().zip(&prompts) {
            assert_eq!(t.epoch.n_samples, 500);
            assert!((t.start_s - m).abs() < 1e-9);
            // the first sample is the one at the marker
            assert_eq!(t.epoch.data[0], (m * 250.0).round() as f32);
        }
        for w in set.trials.windows(2) {
            assert!(w[1].start_s >= w[0].start_s + 2.0);
        }
    }

    #[test]
    fn gap_discards_and_reprompts() {
        let mut rec = CalibrationRecorder::new(1, 250, CalibrationConfig::default()).unwrap();
        // chunk 15 missing: the first trial (prompted at 1.0 s) is cut short
        let ev = run(&mut rec, (0..40).filter(|&i| i != 15).map(ramp_chunk));
        let labels: Vec<_> = ev
            .iter()
            .filter_map(|e| match e {
                CalibrationEvent::Prompt { label, trial_idx, .. } => Some((*trial_idx, *label)),
                _ => None,
            })
            .collect();
        assert!(ev.iter().any(|e| matches!(e, CalibrationEvent::Discarded { trial_idx: 0, .. })));
        assert_eq!(labels[0], labels[1]);
        assert_eq!(rec.discarded, 1);
    }

    #[test]
    fn abort_is_incomplete() {
        let mut rec = CalibrationRecorder::new(1, 250, CalibrationConfig::default()).unwrap();
        let mut recorded = 0;
        for i in 0..10_000 {
            for e in rec.push(&ramp_chunk(i)).unwrap() {
                if matches!(e, CalibrationEvent::Recorded { .. }) {
                    recorded += 1;
                }
            }
            if recorded == 3 {
                break;
            }
        }
        let set = rec.finish();
        assert_eq!(set.trials.len(), 3);
        assert!(!set.is_complete());
    }
}
