use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ispeech_core::personalization::{
    fine_tune_for_user, identify_user, signature_from_windows, CalibrationConfig, CalibrationEvent,
    CalibrationRecorder, IdentityResult, Registry, RestCapture, UserProfile, DEFAULT_IDENTITY_THRESHOLD,
    REST_CAPTURE_S,
};
use ispeech_core::{preprocess, Chunk, DecoderModel, DeviceProfile, Error, FilterState, Result, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::eventlog::{encode_chunk, sha256_hex, EventLog, LogRecord};
use crate::live::{Decimator, LiveConfig, LiveLoop};
use crate::protocol::TelemetryMessage;
use crate::state::{transition, Event, SessionState, TransitionError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Holds `registry.json` and `checkpoints/`.
    pub data_dir: PathBuf,
    /// Pre-trained checkpoint per device profile name.
    pub base_checkpoints: BTreeMap<String, PathBuf>,
    pub live: LiveConfig,
    /// Cosine threshold below which a signature is Unknown.
    pub theta_id: f64,
    pub rest_capture_s: f64,
    pub calibration: CalibrationConfig,
    pub fine_tune: TrainConfig,
    /// Record raw live chunks in the session log so it can be replayed.
    pub log_chunks: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            base_checkpoints: BTreeMap::new(),
            live: LiveConfig::default(),
            theta_id: DEFAULT_IDENTITY_THRESHOLD,
            rest_capture_s: REST_CAPTURE_S,
            calibration: CalibrationConfig::default(),
            fine_tune: TrainConfig::fine_tune(),
            log_chunks: true,
        }
    }
}

impl SessionConfig {
    pub fn registry_path(&self) -> PathBuf {
        self.data_dir.join("registry.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.data_dir.join("checkpoints")
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.live;
        if !(0.0..=1.0).contains(&l.theta_cmd) || !(-1.0..=1.0).contains(&self.theta_id) {
            return Err(Error::Config("thresholds outside their ranges".into()));
        }
        if !(l.debounce_s >= 0.0) || !(l.window_s > 0.0) || !(l.buffer_s >= 2.0 * l.window_s) || !(l.telemetry_rate_hz > 0.0) {
            return Err(Error::Config("live timing settings are invalid".into()));
        }
        if !(self.rest_capture_s > 0.0) {
            return Err(Error::Config("rest capture length must be positive".into()));
        }
        self.fine_tune.validate()
    }
}

/// Source of `created_at` timestamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clock {
    System,
    Fixed(f64),
}

impl Clock {
    pub fn now_s(&self) -> f64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
            Clock::Fixed(t) => *t,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Rejected(#[from] TransitionError),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Failed(#[from] Error),
}

pub type Publisher = Arc<dyn Fn(&TelemetryMessage) + Send + Sync>;

/// One operator session: the workflow state plus everything the current
/// state works on. Not thread-safe; callers serialize access.
pub struct Session {
    config: SessionConfig,
    clock: Clock,
    state: SessionState,
    profile: Option<DeviceProfile>,
    base: Option<(Arc<DecoderModel>, PathBuf)>,
    user: Option<UserProfile>,
    model: Option<(Arc<DecoderModel>, PathBuf)>,
    registering: Option<String>,
    filter: Option<FilterState>,
    decimator: Option<Decimator>,
    rest: Option<RestCapture>,
    rest_windows: Vec<Vec<f32>>,
    calib: Option<CalibrationRecorder>,
    live: Option<LiveLoop>,
    log: Option<EventLog>,
    stream_time_s: Option<f64>,
    publisher: Option<Publisher>,
    last_identity: Option<IdentityResult>,
    outbox: Vec<TelemetryMessage>,
}

impl Session {
    pub fn new(config: SessionConfig, clock: Clock, log_path: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let log = match log_path {
            Some(p) => Some(EventLog::create(p, clock.now_s(), serde_json::to_value(&config)?)?),
            None => None,
        };
        Ok(Self {
            config,
            clock,
            state: SessionState::Idle,
            profile: None,
            base: None,
            user: None,
            model: None,
            registering: None,
            filter: None,
            decimator: None,
            rest: None,
            rest_windows: Vec::new(),
            calib: None,
            live: None,
            log,
            stream_time_s: None,
            publisher: None,
            last_identity: None,
            outbox: Vec::new(),
        })
    }

    /// Every message is also handed to `publisher` as soon as it exists.
    pub fn set_publisher(&mut self, publisher: Publisher) {
        self.publisher = Some(publisher);
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn profile(&self) -> Option<&DeviceProfile> {
        self.profile.as_ref()
    }

    pub fn user(&self) -> Option<&UserProfile> {
        self.user.as_ref()
    }

    pub fn last_identity(&self) -> Option<&IdentityResult> {
        self.last_identity.as_ref()
    }

    pub fn live_loop(&self) -> Option<&LiveLoop> {
        self.live.as_ref()
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(EventLog::path)
    }

    pub fn registry(&self) -> Result<Registry> {
        Registry::load(&self.config.registry_path())
    }

    fn emit(&mut self, msg: TelemetryMessage) {
        if let Some(p) = &self.publisher {
            p(&msg);
        }
        self.outbox.push(msg);
    }

    fn log(&mut self, record: &LogRecord) -> Result<()> {
        match &mut self.log {
            Some(log) => log.append(record),
            None => Ok(()),
        }
    }

    fn go(&mut self, event: Event) -> std::result::Result<(), TransitionError> {
        let next = transition(&self.state, &event)?;
        self.state = next.clone();
        let _ = self.log(&LogRecord::StateChange {
            stream_time_s: self.stream_time_s,
            state: next.clone(),
        });
        self.emit(TelemetryMessage::StateChange { state: next });
        Ok(())
    }

    fn fault(&mut self, reason: String) {
        self.go(Event::Fault { reason }).expect("fault is always legal");
    }

    fn reset(&mut self) {
        self.profile = None;
        self.base = None;
        self.user = None;
        self.model = None;
        self.registering = None;
        self.filter = None;
        self.decimator = None;
        self.rest = None;
        self.rest_windows.clear();
        self.calib = None;
        self.live = None;
    }

    fn take_outbox(&mut self) -> Vec<TelemetryMessage> {
        std::mem::take(&mut self.outbox)
    }

    /// Applies an operator request. Rejected requests leave the state as it
    /// was.
    pub fn command(&mut self, event: Event) -> std::result::Result<Vec<TelemetryMessage>, CommandError> {
        let r = self.command_inner(event);
        let out = self.take_outbox();
        r.map(|_| out)
    }

    fn command_inner(&mut self, event: Event) -> std::result::Result<(), CommandError> {
        // Check legality before doing any work.
        transition(&self.state, &event)?;
        match &event {
            Event::SelectDevice { profile } => {
                let p = DeviceProfile::by_name(profile)?;
                let path = self
                    .config
                    .base_checkpoints
                    .get(&p.name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no base checkpoint configured for `{}`", p.name)))?;
                let model = DecoderModel::load(&path)?;
                if model.config().n_channels != p.n_channels() {
                    return Err(Error::Config(format!(
                        "base checkpoint has {} channels, profile `{}` has {}",
                        model.config().n_channels,
                        p.name,
                        p.n_channels()
                    ))
                    .into());
                }
                self.reset();
                self.filter = Some(FilterState::for_profile(&p));
                self.decimator = Some(Decimator::new(p.n_channels(), p.sampling_rate_hz, self.config.live.telemetry_rate_hz));
                self.base = Some((Arc::new(model), path));
                self.profile = Some(p);
                self.go(event)?;
            }
            Event::Register { display_name } => {
                if display_name.trim().is_empty() {
                    return Err(CommandError::Precondition("display name is empty".into()));
                }
                self.registering = Some(display_name.clone());
                self.go(event)?;
            }
            Event::StartRestCapture => {
                let p = self.profile.as_ref().expect("device selected before capture");
                self.rest = Some(RestCapture::new(p.n_channels(), p.sampling_rate_hz, self.config.rest_capture_s)?);
                self.go(event)?;
            }
            Event::StartCalibration => {
                if self.user.is_none() {
                    return Err(CommandError::Precondition("no identified user to calibrate".into()));
                }
                let p = self.profile.as_ref().expect("device selected");
                self.calib = Some(CalibrationRecorder::new(
                    p.n_channels(),
                    p.sampling_rate_hz,
                    self.config.calibration.clone(),
                )?);
                self.go(event)?;
            }
            Event::Activate => {
                if self.user.is_none() {
                    return Err(CommandError::Precondition("no identified user to activate".into()));
                }
                self.go(event)?;
                self.start_live()?;
            }
            Event::Stop => {
                self.reset();
                self.go(event)?;
            }
            _ => {
                return Err(CommandError::Precondition(format!(
                    "{event:?} is raised by the session, not by the operator"
                )))
            }
        }
        Ok(())
    }

    /// Reports that the acquisition stream is gone.
    pub fn stream_lost(&mut self) -> Vec<TelemetryMessage> {
        if self.go(Event::StreamLost).is_ok() {
            self.reset();
        }
        self.take_outbox()
    }

    fn start_live(&mut self) -> Result<()> {
        let p = self.profile.clone().expect("device selected");
        let (model, path) = self.model.clone().or_else(|| self.base.clone()).expect("model loaded");
        let bytes = std::fs::read(&path)?;
        self.log(&LogRecord::LiveStart {
            checkpoint_path: path.to_string_lossy().into_owned(),
            checkpoint_sha256: sha256_hex(&bytes),
            model_config_sha256: crate::eventlog::hex(&model.config().digest()),
            sampling_rate_hz: p.sampling_rate_hz,
            live_config: self.config.live.clone(),
        })?;
        self.live = Some(LiveLoop::new(model, p.sampling_rate_hz, self.config.live.clone())?);
        Ok(())
    }

    /// Feeds one raw chunk from the acquisition stream. Workflow failures
    /// move the session to Error and are not returned as errors.
    pub fn handle_chunk(&mut self, raw: &Chunk, arrived: Option<Instant>) -> Result<Vec<TelemetryMessage>> {
        let r = self.handle_chunk_inner(raw, arrived);
        if let Err(e) = &r {
            if !matches!(self.state, SessionState::Error { .. } | SessionState::Idle) {
                self.fault(e.to_string());
            }
        }
        let out = self.take_outbox();
        r.map(|_| out)
    }

    fn handle_chunk_inner(&mut self, raw: &Chunk, arrived: Option<Instant>) -> Result<()> {
        let Some(profile) = &self.profile else {
            return Ok(());
        };
        if raw.n_channels != profile.n_channels() {
            return Err(Error::Data(format!(
                "chunk has {} channels, device `{}` has {}",
                raw.n_channels,
                profile.name,
                profile.n_channels()
            )));
        }
        self.stream_time_s = Some(raw.timestamp_s);

        if let (SessionState::Live, Some(live)) = (&self.state, self.live.as_mut()) {
            let out = live.tick(raw, arrived)?;
            if self.config.log_chunks {
                self.log(&encode_chunk(raw))?;
            }
            if let Some(frame) = out.frame {
                self.emit(TelemetryMessage::SignalFrame(frame));
            }
            if let Some(ev) = out.event {
                self.log(&LogRecord::Inference { event: ev.clone() })?;
                self.emit(TelemetryMessage::InferenceEvent(ev));
            }
            return Ok(());
        }

        let filter = self.filter.as_mut().expect("filter set with the device");
        let pre = preprocess(raw, filter)?;
        if let Some(frame) = self.decimator.as_mut().and_then(|d| d.push(&pre)) {
            self.emit(TelemetryMessage::SignalFrame(frame));
        }
        match self.state {
            SessionState::CapturingRest { .. } => {
                let rest = self.rest.as_mut().expect("capture started");
                let progress = rest.push(&pre)?;
                let (target, done) = (rest.target_s(), rest.is_complete());
                self.emit(TelemetryMessage::Progress {
                    phase: "rest_capture".into(),
                    value: progress,
                    target,
                });
                self.go(Event::RestProgress { progress_s: progress })
                    .expect("progress in capture");
                if done {
                    self.rest_complete()?;
                }
            }
            SessionState::Calibrating { .. } => {
                let events = self.calib.as_mut().expect("calibration started").push(&pre)?;
                for ev in events {
                    self.calibration_event(ev)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn rest_complete(&mut self) -> Result<()> {
        let rest = self.rest.take().expect("capture");
        self.go(Event::RestComplete).expect("capture complete");
        let (base, base_path) = self.base.clone().expect("base model");
        let windows = rest.windows();
        let signature = signature_from_windows(&base, &windows)?;
        self.rest_windows = windows;
        let device = self.profile.as_ref().expect("device").name.clone();
        let mut registry = self.registry()?;

        if let Some(name) = self.registering.take() {
            let user = UserProfile {
                user_id: registry.next_user_id(),
                display_name: name,
                signature,
                checkpoint_path: base_path.to_string_lossy().into_owned(),
                device,
                created_at: self.clock.now_s(),
            };
            registry.upsert(user.clone())?;
            registry.save(&self.config.registry_path())?;
            self.last_identity = None;
            self.model = Some((base, base_path));
            let id = user.user_id.clone();
            self.user = Some(user);
            self.go(Event::UserResolved { user_id: id }).expect("identifying");
            return Ok(());
        }

        // Only users of this device share the signature space.
        registry.users.retain(|u| u.device == device);
        let result = identify_user(&signature, &registry, self.config.theta_id);
        self.emit(TelemetryMessage::Progress {
            phase: "identification".into(),
            value: match &result {
                IdentityResult::Known { cosine, .. } => *cosine,
                IdentityResult::Unknown { best_cosine } => best_cosine.unwrap_or(-1.0),
            },
            target: self.config.theta_id,
        });
        self.last_identity = Some(result.clone());
        match result {
            IdentityResult::Known { user_id, .. } => {
                let user = registry.get(&user_id).cloned().expect("identified user exists");
                let model = user.load_model()?;
                self.model = Some((Arc::new(model), PathBuf::from(&user.checkpoint_path)));
                self.user = Some(user);
                self.go(Event::UserResolved { user_id }).expect("identifying");
            }
            IdentityResult::Unknown { .. } => {
                self.go(Event::IdentityUnknown).expect("identifying");
            }
        }
        Ok(())
    }

    fn calibration_event(&mut self, ev: CalibrationEvent) -> Result<()> {
        match ev {
            CalibrationEvent::Prompt {
                trial_idx,
                total,
                label,
                marker_s,
            } => {
                self.emit(TelemetryMessage::CalibrationPrompt {
                    trial_idx,
                    total,
                    label,
                    word: label.word().to_string(),
                    marker_s,
                });
                self.go(Event::TrialPrompt { trial_idx, label }).expect("calibrating");
            }
            CalibrationEvent::Recorded { trial_idx, .. } => {
                let total = self.calib.as_ref().map_or(0, |c| c.total_trials());
                self.emit(TelemetryMessage::Progress {
                    phase: "calibration".into(),
                    value: (trial_idx + 1) as f64,
                    target: total as f64,
                });
            }
            CalibrationEvent::Discarded { .. } => {}
            CalibrationEvent::Complete => {
                self.go(Event::CalibrationComplete).expect("calibrating");
                self.fine_tune()?;
            }
        }
        Ok(())
    }

    fn fine_tune(&mut self) -> Result<()> {
        let set = self.calib.take().expect("calibration").finish();
        let (base, _) = self.base.clone().expect("base model");
        let user = self.user.clone().expect("user");
        let windows = std::mem::take(&mut self.rest_windows);
        let cfg = self.config.fine_tune.clone();
        let (ckpt_dir, registry_path) = (self.config.checkpoint_dir(), self.config.registry_path());
        let target = cfg.epochs as f64;
        let outcome = fine_tune_for_user(
            &base,
            &set,
            &windows,
            &user,
            &cfg,
            &ckpt_dir,
            &registry_path,
            &mut |epoch, _loss| {
                self.emit(TelemetryMessage::Progress {
                    phase: "fine_tune".into(),
                    value: epoch as f64,
                    target,
                });
                let _ = self.go(Event::FineTuneProgress { epoch });
            },
        )?;
        let mut user = user;
        user.checkpoint_path = outcome.checkpoint_path.to_string_lossy().into_owned();
        self.user = Some(user);
        self.model = Some((Arc::new(outcome.model), outcome.checkpoint_path));
        self.go(Event::FineTuneComplete).expect("fine tuning");
        self.start_live()
    }
}
