//! Deterministic single-threaded session driver: the simulated user and the
//! session advance in lockstep, one chunk at a time.

use ispeech_core::personalization::IdentityResult;
use ispeech_core::stream::Segment;
use ispeech_core::{ClassLabel, Error, Result};
use serde::{Deserialize, Serialize};

use crate::protocol::{InferenceEvent, TelemetryMessage};
use crate::session::{CommandError, Session};
use crate::sim_user::SimulatedUser;
use crate::state::{Event, SessionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScript {
    /// Register under this name; identify an existing user when absent.
    pub display_name: Option<String>,
    pub calibrate: bool,
    /// Label timeline streamed once Live.
    pub live: Vec<Segment>,
}

impl SessionScript {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledEvent {
    pub event: InferenceEvent,
    /// Label of the live segment the window ends in.
    pub truth: ClassLabel,
    /// Window end minus the onset of that segment.
    pub since_onset_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HeadlessReport {
    /// Distinct consecutive states in visiting order.
    pub states: Vec<SessionState>,
    pub live_events: Vec<LabelledEvent>,
    pub prompts: usize,
    pub chunks: usize,
    pub final_state: Option<SessionState>,
    pub messages: usize,
    /// Commands emitted outside Live (must stay zero).
    pub commands_outside_live: usize,
    pub user_id: Option<String>,
    pub identity: Option<IdentityResult>,
}

impl HeadlessReport {
    pub fn visited(&self, name: &str) -> bool {
        self.states.iter().any(|s| s.name() == name)
    }
}

fn command(session: &mut Session, report: &mut HeadlessReport, event: Event) -> Result<()> {
    match session.command(event) {
        Ok(msgs) => {
            absorb(report, session, &msgs, None);
            Ok(())
        }
        Err(CommandError::Failed(e)) => Err(e),
        Err(e) => Err(Error::Config(e.to_string())),
    }
}

fn absorb(report: &mut HeadlessReport, session: &Session, msgs: &[TelemetryMessage], mut user: Option<&mut SimulatedUser>) {
    report.messages += msgs.len();
    for m in msgs {
        match m {
            TelemetryMessage::StateChange { state } => {
                if report.states.last().map(SessionState::name) != Some(state.name()) {
                    report.states.push(state.clone());
                }
            }
            TelemetryMessage::CalibrationPrompt { label, marker_s, .. } => {
                report.prompts += 1;
                if let Some(u) = user.as_deref_mut() {
                    u.on_prompt(*label, *marker_s, session.config().calibration.trial_s);
                }
            }
            _ => {}
        }
    }
}

fn feed(session: &mut Session, user: &mut SimulatedUser, report: &mut HeadlessReport) -> Result<Vec<TelemetryMessage>> {
    let chunk = user.next_chunk();
    let live = session.state().allows_commands();
    let msgs = session.handle_chunk(&chunk, None)?;
    report.chunks += 1;
    for m in &msgs {
        if let TelemetryMessage::InferenceEvent(e) = m {
            if e.emitted_command.is_some() && !live {
                report.commands_outside_live += 1;
            }
        }
    }
    absorb(report, session, &msgs, Some(user));
    Ok(msgs)
}

/// Runs the whole workflow `script` describes on `device`.
/// `max_setup_chunks` bounds every non-live phase.
pub fn run_headless(
    session: &mut Session,
    user: &mut SimulatedUser,
    device: &str,
    script: &SessionScript,
    max_setup_chunks: usize,
) -> Result<HeadlessReport> {
    let mut report = HeadlessReport::default();
    report.states.push(session.state().clone());
    command(session, &mut report, Event::SelectDevice { profile: device.into() })?;
    if let Some(name) = &script.display_name {
        command(
            session,
            &mut report,
            Event::Register {
                display_name: name.clone(),
            },
        )?;
    }
    command(session, &mut report, Event::StartRestCapture)?;
    let mut budget = max_setup_chunks;
    while matches!(session.state(), SessionState::CapturingRest { .. }) && budget > 0 {
        feed(session, user, &mut report)?;
        budget -= 1;
    }
    report.identity = session.last_identity().cloned();
    report.user_id = session.user().map(|u| u.user_id.clone());
    if *session.state() != SessionState::Identifying {
        report.final_state = Some(session.state().clone());
        return Ok(report);
    }
    if script.calibrate {
        command(session, &mut report, Event::StartCalibration)?;
        let mut budget = max_setup_chunks;
        while matches!(session.state(), SessionState::Calibrating { .. }) && budget > 0 {
            feed(session, user, &mut report)?;
            budget -= 1;
        }
    } else {
        command(session, &mut report, Event::Activate)?;
    }
    if *session.state() != SessionState::Live {
        report.final_state = Some(session.state().clone());
        return Ok(report);
    }

    user.follow(&script.live);
    let total: f64 = script.live.iter().map(|s| s.duration_s).sum();
    let end = user.next_timestamp_s() + total;
    let mut onsets = Vec::new();
    let mut t = user.next_timestamp_s();
    for s in &script.live {
        onsets.push((s.label, t, t + s.duration_s));
        t += s.duration_s;
    }
    let eps = 1e-6;
    while user.next_timestamp_s() < end - eps {
        for m in feed(session, user, &mut report)? {
            if let TelemetryMessage::InferenceEvent(ev) = m {
                // the window's last sample lies just before its end timestamp
                let t_last = ev.end_timestamp_s - eps;
                if let Some(&(truth, onset, _)) = onsets.iter().find(|(_, a, b)| t_last >= *a && t_last < *b) {
                    report.live_events.push(LabelledEvent {
                        since_onset_s: ev.end_timestamp_s - onset,
                        event: ev,
                        truth,
                    });
                }
            }
        }
        if *session.state() != SessionState::Live {
            break;
        }
    }
    report.final_state = Some(session.state().clone());
    report.user_id = session.user().map(|u| u.user_id.clone());
    report.identity = session.last_identity().cloned();
    command(session, &mut report, Event::Stop)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub label: ClassLabel,
    /// Events whose window ends at least `settle_s` after onset.
    pub settled_events: usize,
    pub settled_correct: usize,
    /// Earliest correct emitted command, seconds after onset.
    pub first_correct_s: Option<f64>,
}

impl SegmentScore {
    pub fn majority_correct(&self) -> bool {
        2 * self.settled_correct > self.settled_events
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveScore {
    /// Events whose whole window lies in REST.
    pub rest_events: usize,
    pub rest_commands: usize,
    pub segments: Vec<SegmentScore>,
}

impl LiveScore {
    pub fn command_segments_majority_correct(&self) -> usize {
        self.segments.iter().filter(|s| s.majority_correct()).count()
    }
}

/// Scores live events against the timeline: false commands on pure REST
/// windows, and per command segment the share of events ending at least
/// `settle_s` after onset that carry the right command.
pub fn score_live(events: &[LabelledEvent], window_s: f64, settle_s: f64) -> LiveScore {
    let eps = 1e-6;
    let mut score = LiveScore {
        rest_events: 0,
        rest_commands: 0,
        segments: Vec::new(),
    };
    let mut current: Option<SegmentScore> = None;
    let mut last_since = f64::INFINITY;
    for e in events {
        let new_segment = e.since_onset_s < last_since;
        last_since = e.since_onset_s;
        if new_segment {
            if let Some(s) = current.take() {
                score.segments.push(s);
            }
            if e.truth.is_command() {
                current = Some(SegmentScore {
                    label: e.truth,
                    settled_events: 0,
                    settled_correct: 0,
                    first_correct_s: None,
                });
            }
        }
        if e.truth == ClassLabel::Rest {
            if e.since_onset_s >= window_s - eps {
                score.rest_events += 1;
                score.rest_commands += usize::from(e.event.emitted_command.is_some());
            }
            continue;
        }
        let Some(seg) = current.as_mut() else { continue };
        let correct = e.event.emitted_command == Some(e.truth);
        if correct && seg.first_correct_s.is_none() {
            seg.first_correct_s = Some(e.since_onset_s);
        }
        if e.since_onset_s >= settle_s - eps {
            seg.settled_events += 1;
            seg.settled_correct += usize::from(correct);
        }
    }
    if let Some(s) = current {
        score.segments.push(s);
    }
    score
}
