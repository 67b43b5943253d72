use std::fmt;

use ispeech_core::ClassLabel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    DeviceSelect { profile: String },
    Registering { display_name: Option<String> },
    CapturingRest { progress_s: f64 },
    Identifying,
    Calibrating { trial_idx: usize, label: ClassLabel },
    FineTuning { epoch: usize },
    Live,
    Error { reason: String },
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::DeviceSelect { .. } => "device_select",
            SessionState::Registering { .. } => "registering",
            SessionState::CapturingRest { .. } => "capturing_rest",
            SessionState::Identifying => "identifying",
            SessionState::Calibrating { .. } => "calibrating",
            SessionState::FineTuning { .. } => "fine_tuning",
            SessionState::Live => "live",
            SessionState::Error { .. } => "error",
        }
    }

    /// Whether emitted commands may leave the decoder in this state.
    pub fn allows_commands(&self) -> bool {
        matches!(self, SessionState::Live)
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::DeviceSelect { profile } => write!(f, "device_select({profile})"),
            SessionState::CapturingRest { progress_s } => write!(f, "capturing_rest({progress_s:.1})"),
            SessionState::Calibrating { trial_idx, label } => write!(f, "calibrating({trial_idx}, {label})"),
            SessionState::FineTuning { epoch } => write!(f, "fine_tuning({epoch})"),
            SessionState::Error { reason } => write!(f, "error({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Operator requests and internally generated workflow events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SelectDevice { profile: String },
    Register { display_name: String },
    StartRestCapture,
    StartCalibration,
    Activate,
    Stop,

    RestProgress { progress_s: f64 },
    RestComplete,
    /// Identification resolved to a user, or a new user was stored.
    UserResolved { user_id: String },
    IdentityUnknown,
    TrialPrompt { trial_idx: usize, label: ClassLabel },
    CalibrationComplete,
    FineTuneProgress { epoch: usize },
    FineTuneComplete,
    StreamLost,
    Fault { reason: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("event {event:?} is not allowed in state {state}")]
pub struct TransitionError {
    pub state: SessionState,
    pub event: Event,
}

/// Next workflow state, or an error leaving `state` as it was.
pub fn transition(state: &SessionState, event: &Event) -> Result<SessionState, TransitionError> {
    use Event as E;
    use SessionState as S;
    let next = match (state, event) {
        (_, E::Fault { reason }) => Some(S::Error { reason: reason.clone() }),
        (_, E::Stop) => Some(S::Idle),
        (S::Idle | S::Error { .. }, E::StreamLost) => None,
        (_, E::StreamLost) => Some(S::Error {
            reason: "stream lost".into(),
        }),

        (S::Idle | S::DeviceSelect { .. }, E::SelectDevice { profile }) => Some(S::DeviceSelect {
            profile: profile.clone(),
        }),
        (S::DeviceSelect { .. } | S::Registering { .. }, E::Register { display_name }) => Some(S::Registering {
            display_name: Some(display_name.clone()),
        }),
        (S::DeviceSelect { .. }, E::StartRestCapture) => Some(S::CapturingRest { progress_s: 0.0 }),
        (S::Registering { display_name: Some(_) }, E::StartRestCapture) => Some(S::CapturingRest { progress_s: 0.0 }),

        (S::CapturingRest { .. }, E::RestProgress { progress_s }) => Some(S::CapturingRest {
            progress_s: *progress_s,
        }),
        (S::CapturingRest { .. }, E::RestComplete) => Some(S::Identifying),

        (S::Identifying, E::UserResolved { .. }) => Some(S::Identifying),
        (S::Identifying, E::IdentityUnknown) => Some(S::Registering { display_name: None }),
        // REST until the first prompt.
        (S::Identifying, E::StartCalibration) => Some(S::Calibrating {
            trial_idx: 0,
            label: ClassLabel::Rest,
        }),
        (S::Calibrating { .. }, E::TrialPrompt { trial_idx, label }) => Some(S::Calibrating {
            trial_idx: *trial_idx,
            label: *label,
        }),
        (S::Identifying, E::Activate) => Some(S::Live),

        (S::Calibrating { .. }, E::CalibrationComplete) => Some(S::FineTuning { epoch: 0 }),
        (S::FineTuning { .. }, E::FineTuneProgress { epoch }) => Some(S::FineTuning { epoch: *epoch }),
        (S::FineTuning { .. }, E::FineTuneComplete) => Some(S::Live),
        _ => None,
    };
    next.ok_or_else(|| TransitionError {
        state: state.clone(),
        event: event.clone(),
    })
}
