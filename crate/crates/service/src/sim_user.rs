use ispeech_core::stream::Segment;
use ispeech_core::synth::{SubjectModel, SynthStream};
use ispeech_core::{Chunk, ClassLabel};

/// Synthetic subject that imagines what it is told: it follows calibration
/// prompts and, in live use, a label timeline.
#[derive(Debug, Clone)]
pub struct SimulatedUser {
    stream: SynthStream,
    chunk_samples: usize,
    rate_hz: f64,
    // (label, start_s, end_s) of the prompted trial.
    trial: Option<(ClassLabel, f64, f64)>,
    timeline: Vec<(ClassLabel, f64, f64)>,
}

impl SimulatedUser {
    pub fn new(subject: SubjectModel, seed: u64, chunk_samples: usize) -> Self {
        let rate_hz = subject.sampling_rate_hz as f64;
        Self {
            stream: SynthStream::new(subject, seed, ClassLabel::Rest),
            chunk_samples,
            rate_hz,
            trial: None,
            timeline: Vec::new(),
        }
    }

    pub fn next_timestamp_s(&self) -> f64 {
        self.stream.next_timestamp_s()
    }

    pub fn label(&self) -> ClassLabel {
        self.stream.label()
    }

    pub fn subject(&self) -> &SubjectModel {
        self.stream.subject()
    }

    /// Imagine `label` from `marker_s` for `trial_s` seconds.
    pub fn on_prompt(&mut self, label: ClassLabel, marker_s: f64, trial_s: f64) {
        self.trial = Some((label, marker_s, marker_s + trial_s));
    }

    /// Follow `segments` starting at the next chunk.
    pub fn follow(&mut self, segments: &[Segment]) {
        let mut t = self.next_timestamp_s();
        self.timeline = segments
            .iter()
            .map(|s| {
                let seg = (s.label, t, t + s.duration_s);
                t += s.duration_s;
                seg
            })
            .collect();
    }

    /// Label of the timeline segment covering stream time `t`.
    pub fn timeline_label_at(&self, t: f64) -> Option<ClassLabel> {
        let eps = 0.5 / self.rate_hz;
        self.timeline
            .iter()
            .find(|(_, a, b)| t >= a - eps && t < b - eps)
            .map(|(l, _, _)| *l)
    }

    pub fn next_chunk(&mut self) -> Chunk {
        let t = self.next_timestamp_s();
        let eps = 0.5 / self.rate_hz;
        let mut label = self.timeline_label_at(t).unwrap_or(ClassLabel::Rest);
        if let Some((l, a, b)) = self.trial {
            if t >= a - eps && t < b - eps {
                label = l;
            } else if t >= b - eps {
                self.trial = None;
            }
        }
        if label != self.stream.label() {
            self.stream.set_label(label);
        }
        self.stream.next_chunk(self.chunk_samples)
    }
}
