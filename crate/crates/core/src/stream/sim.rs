//! Scripted device simulator feeding an outlet from the synthetic generator.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{ClassLabel, DeviceProfile};
use crate::stream::hub::Outlet;
use crate::synth::{SubjectModel, SynthStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: ClassLabel,
    pub duration_s: f64,
}

/// Label timeline for one simulated subject. `seed` drives the noise and
/// trial randomness; the subject's anatomy comes from its [`SubjectModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScript {
    pub subject_id: String,
    pub seed: u64,
    pub timeline: Vec<Segment>,
}

impl SimScript {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn total_duration_s(&self) -> f64 {
        self.timeline.iter().map(|s| s.duration_s).sum()
    }
}

/// How fast the simulator emits chunks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    /// As fast as possible, no sleeping.
    Headless,
    /// Wall-clock pacing; `factor` 2.0 runs twice as fast as real time.
    RealTime { factor: f64 },
}

impl Pace {
    pub fn real_time(factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Config(format!("pace factor must be positive, got {factor}")));
        }
        Ok(Pace::RealTime { factor })
    }
}

/// Stream time at which a segment of the timeline began.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMarker {
    pub timestamp_s: f64,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub chunks: usize,
    pub markers: Vec<LabelMarker>,
}

/// Keeps chunk emission on a wall-clock schedule.
#[derive(Debug)]
pub struct Pacer {
    pace: Pace,
    start: Instant,
}

impl Pacer {
    pub fn new(pace: Pace) -> Self {
        Self {
            pace,
            start: Instant::now(),
        }
    }

    /// Blocks until `stream_elapsed_s` of stream time is due.
    pub fn wait_until(&self, stream_elapsed_s: f64) {
        if let Pace::RealTime { factor } = self.pace {
            let due = self.start + Duration::from_secs_f64(stream_elapsed_s / factor);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
}

fn check(profile: &DeviceProfile, script: &SimScript, subject: &SubjectModel, period: f64) -> Result<()> {
    if script.subject_id != subject.subject_id {
        return Err(Error::Config(format!(
            "script is for subject `{}`, simulator was given `{}`",
            script.subject_id, subject.subject_id
        )));
    }
    if profile.n_channels() != subject.n_channels || profile.sampling_rate_hz != subject.sampling_rate_hz {
        return Err(Error::Config(format!(
            "subject model has {} channels at {} Hz, profile `{}` has {} at {} Hz",
            subject.n_channels,
            subject.sampling_rate_hz,
            profile.name,
            profile.n_channels(),
            profile.sampling_rate_hz
        )));
    }
    for seg in &script.timeline {
        let chunks = seg.duration_s / period;
        if !(seg.duration_s > 0.0) || (chunks - chunks.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "segment duration {} s is not a positive multiple of the {period} s chunk period",
                seg.duration_s
            )));
        }
    }
    Ok(())
}

/// Emits the script's timeline through `outlet`, one chunk per period.
pub fn run_simulator(
    profile: &DeviceProfile,
    script: &SimScript,
    subject: &SubjectModel,
    outlet: &Outlet,
    pace: Pace,
) -> Result<SimReport> {
    if let Pace::RealTime { factor } = pace {
        Pace::real_time(factor)?;
    }
    let period = outlet.info().chunk_period_s;
    if outlet.info().profile != *profile {
        return Err(Error::Config(format!(
            "outlet declares profile `{}`, simulator was given `{}`",
            outlet.info().profile.name,
            profile.name
        )));
    }
    check(profile, script, subject, period)?;
    let per_chunk = outlet.samples_per_chunk();
    let first = script.timeline.first().map_or(ClassLabel::Rest, |s| s.label);
    let mut stream = SynthStream::new(subject.clone(), script.seed, first);
    let pacer = Pacer::new(pace);
    let mut markers = Vec::with_capacity(script.timeline.len());
    let mut chunks = 0usize;
    for (i, seg) in script.timeline.iter().enumerate() {
        if i > 0 {
            stream.set_label(seg.label);
        }
        markers.push(LabelMarker {
            timestamp_s: stream.next_timestamp_s(),
            label: seg.label,
        });
        let n = (seg.duration_s / period).round() as usize;
        for _ in 0..n {
            let chunk = stream.next_chunk(per_chunk);
            chunks += 1;
            pacer.wait_until(chunks as f64 * period);
            outlet.push_chunk(chunk)?;
        }
    }
    Ok(SimReport { chunks, markers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::hub::{Hub, StreamInfo};
    use crate::synth::SynthParams;

    fn setup(id: &str) -> (Hub, Outlet, SubjectModel) {
        let profile = DeviceProfile::wireless();
        let hub = Hub::new();
        let outlet = hub.open_outlet(StreamInfo::new(id, profile.clone(), 0.1).unwrap()).unwrap();
        let subject = SubjectModel::new("S01", 42, &profile, &SynthParams::default()).unwrap();
        (hub, outlet, subject)
    }

    fn script(timeline: Vec<Segment>) -> SimScript {
        SimScript {
            subject_id: "S01".into(),
            seed: 7,
            timeline,
        }
    }

    #[test]
    fn rest_five_seconds_is_fifty_chunks() {
        let (hub, outlet, subject) = setup("eeg");
        let inlet = hub.subscribe("eeg").unwrap();
        let s = script(vec![Segment {
            label: ClassLabel::Rest,
            duration_s: 5.0,
        }]);
        let report = run_simulator(&DeviceProfile::wireless(), &s, &subject, &outlet, Pace::Headless).unwrap();
        assert_eq!(report.chunks, 50);
        assert_eq!(report.markers, vec![LabelMarker { timestamp_s: 0.0, label: ClassLabel::Rest }]);
        assert_eq!(inlet.drain().len(), 50);
    }

    #[test]
    fn zero_pace_rejected() {
        assert!(Pace::real_time(0.0).is_err());
        let (_hub, outlet, subject) = setup("eeg");
        let s = script(vec![Segment {
            label: ClassLabel::Rest,
            duration_s: 1.0,
        }]);
        let r = run_simulator(
            &DeviceProfile::wireless(),
            &s,
            &subject,
            &outlet,
            Pace::RealTime { factor: 0.0 },
        );
        assert!(r.is_err());
    }

    #[test]
    fn mismatches_rejected() {
        let (_hub, outlet, subject) = setup("eeg");
        let mut s = script(vec![Segment {
            label: ClassLabel::Rest,
            duration_s: 1.0,
        }]);
        assert!(run_simulator(&DeviceProfile::wired(), &s, &subject, &outlet, Pace::Headless).is_err());
        s.subject_id = "other".into();
        assert!(run_simulator(&DeviceProfile::wireless(), &s, &subject, &outlet, Pace::Headless).is_err());
        s.subject_id = "S01".into();
        s.timeline[0].duration_s = 0.15;
        assert!(run_simulator(&DeviceProfile::wireless(), &s, &subject, &outlet, Pace::Headless).is_err());
    }

    #[test]
    fn script_json_round_trip() {
        let s = script(vec![
            Segment {
                label: ClassLabel::Rest,
                duration_s: 2.0,
            },
            Segment {
                label: ClassLabel::HelpMe,
                duration_s: 2.0,
            },
        ]);
        assert_eq!(SimScript::from_json(&s.to_json()).unwrap(), s);
        assert!(s.to_json().contains("\"C1\""));
    }
}
