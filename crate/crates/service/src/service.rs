//! Threaded service: a stream consumer driving the session, an HTTP control
//! API, a TCP telemetry endpoint and an optional simulated headset.

use std::io::Read;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use ispeech_core::stream::{DropPolicy, Hub, Inlet, Pace, Pacer, Segment, StreamInfo, DEFAULT_CHUNK_PERIOD_S};
use ispeech_core::synth::{SubjectModel, SynthParams};
use ispeech_core::{ClassLabel, DeviceProfile, Error, Result};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::protocol::{TelemetryMessage, PROTOCOL_VERSION};
use crate::session::{Clock, CommandError, Session, SessionConfig};
use crate::sim_user::SimulatedUser;
use crate::state::{transition, Event, SessionState};
use crate::telemetry::{TelemetryBus, TelemetryServer, DEFAULT_SUBSCRIBER_CAPACITY};

/// A simulated headset worn by a synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSource {
    /// Population seed and index of the synthetic subject (its identity).
    pub subject_seed: u64,
    pub subject_index: usize,
    /// Seed of the signal noise.
    pub noise_seed: u64,
    pub pace_factor: f64,
    /// Timeline repeated while Live.
    pub live_script: Vec<Segment>,
}

impl Default for SimulatedSource {
    fn default() -> Self {
        let seg = |label, duration_s| Segment { label, duration_s };
        Self {
            subject_seed: 1,
            subject_index: 0,
            noise_seed: 2,
            pace_factor: 1.0,
            live_script: vec![
                seg(ClassLabel::Rest, 4.0),
                seg(ClassLabel::HelpMe, 3.0),
                seg(ClassLabel::Rest, 4.0),
                seg(ClassLabel::TellMe, 3.0),
                seg(ClassLabel::Rest, 4.0),
                seg(ClassLabel::Bored, 3.0),
                seg(ClassLabel::Rest, 4.0),
                seg(ClassLabel::Tired, 3.0),
            ],
        }
    }
}

#[derive(Clone)]
pub enum StreamSource {
    Simulated(SimulatedSource),
    /// Subscribe to `stream_id` on an existing hub.
    Hub { hub: Hub, stream_id: String },
}

pub struct ServiceConfig {
    pub session: SessionConfig,
    pub http_addr: String,
    pub telemetry_addr: String,
    /// Shared secret for the control API; `None` disables the check.
    pub token: Option<String>,
    pub source: StreamSource,
    pub log_path: Option<PathBuf>,
    pub telemetry_capacity: usize,
}

impl ServiceConfig {
    pub fn new(session: SessionConfig, source: StreamSource) -> Self {
        Self {
            session,
            http_addr: "127.0.0.1:0".into(),
            telemetry_addr: "127.0.0.1:0".into(),
            token: None,
            source,
            log_path: None,
            telemetry_capacity: DEFAULT_SUBSCRIBER_CAPACITY,
        }
    }
}

enum SimCommand {
    Prompt { label: ClassLabel, marker_s: f64, trial_s: f64 },
    Live(bool),
}

struct SimHandle {
    stop: Arc<AtomicBool>,
    tx: Sender<SimCommand>,
    thread: Option<JoinHandle<()>>,
}

impl SimHandle {
    fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn spawn_simulator(profile: &DeviceProfile, cfg: &SimulatedSource) -> Result<(Inlet, SimHandle)> {
    let hub = Hub::new();
    let info = StreamInfo::new("simulated", profile.clone(), DEFAULT_CHUNK_PERIOD_S)?;
    let period = info.chunk_period_s;
    let outlet = hub.open_outlet(info)?;
    let inlet = hub.subscribe_with_policy("simulated", DropPolicy::ZeroDrop)?;
    let subject = SubjectModel::population_member(cfg.subject_index, cfg.subject_seed, profile, &SynthParams::default())?;
    let mut user = SimulatedUser::new(subject, cfg.noise_seed, outlet.samples_per_chunk());
    let pace = Pace::real_time(cfg.pace_factor)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx): (Sender<SimCommand>, Receiver<SimCommand>) = unbounded();
    let stop2 = stop.clone();
    let script = cfg.live_script.clone();
    let thread = std::thread::Builder::new().name("simulator".into()).spawn(move || {
        let pacer = Pacer::new(pace);
        let mut n = 0u64;
        while !stop2.load(Ordering::Acquire) {
            n += 1;
            pacer.wait_until(n as f64 * period);
            for cmd in rx.try_iter() {
                match cmd {
                    SimCommand::Prompt { label, marker_s, trial_s } => user.on_prompt(label, marker_s, trial_s),
                    SimCommand::Live(true) if !script.is_empty() => {
                        // enough repetitions for a long session
                        let one: f64 = script.iter().map(|s| s.duration_s).sum();
                        let reps = (7200.0 / one.max(1.0)).ceil() as usize;
                        user.follow(&script.repeat(reps));
                    }
                    SimCommand::Live(_) => user.follow(&[]),
                }
            }
            if outlet.push_chunk(user.next_chunk()).is_err() {
                break;
            }
        }
    })?;
    Ok((
        inlet,
        SimHandle {
            stop,
            tx,
            thread: Some(thread),
        },
    ))
}

struct Shared {
    session: Mutex<Session>,
    snapshot: RwLock<SessionState>,
    inlet: Mutex<Option<Arc<Inlet>>>,
    sim: Mutex<Option<SimHandle>>,
    source: StreamSource,
    token: Option<String>,
    bus: Arc<TelemetryBus>,
    stop: AtomicBool,
    trial_s: f64,
}

pub struct Service {
    shared: Arc<Shared>,
    http_addr: SocketAddr,
    telemetry: TelemetryServer,
    threads: Vec<JoinHandle<()>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Value,
}

impl HttpResponse {
    fn new(status: u16, body: Value) -> Self {
        Self { status, body }
    }
}

impl Service {
    pub fn start(config: ServiceConfig) -> Result<Self> {
        let bus = TelemetryBus::new();
        let mut session = Session::new(config.session.clone(), Clock::System, config.log_path.as_deref())?;
        let http = tiny_http::Server::http(&config.http_addr)
            .map_err(|e| Error::Config(format!("cannot bind control API on {}: {e}", config.http_addr)))?;
        let http_addr = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config("control API is not on an IP socket".into()))?;
        let telemetry = TelemetryServer::start(&config.telemetry_addr, bus.clone(), config.telemetry_capacity)
            .map_err(|e| Error::Config(format!("cannot bind telemetry on {}: {e}", config.telemetry_addr)))?;

        let shared = Arc::new_cyclic(|weak: &std::sync::Weak<Shared>| {
            let weak = weak.clone();
            let bus2 = bus.clone();
            session.set_publisher(Arc::new(move |msg: &TelemetryMessage| {
                if let Some(shared) = weak.upgrade() {
                    shared.on_message(msg);
                }
                bus2.publish(msg);
            }));
            Shared {
                session: Mutex::new(session),
                snapshot: RwLock::new(SessionState::Idle),
                inlet: Mutex::new(None),
                sim: Mutex::new(None),
                source: config.source.clone(),
                token: config.token.clone(),
                bus: bus.clone(),
                stop: AtomicBool::new(false),
                trial_s: config.session.calibration.trial_s,
            }
        });

        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(std::thread::Builder::new().name("consumer".into()).spawn(move || s.consume())?);
        let s = shared.clone();
        threads.push(std::thread::Builder::new().name("control".into()).spawn(move || {
            while !s.stop.load(Ordering::Acquire) {
                if let Ok(Some(req)) = http.recv_timeout(Duration::from_millis(100)) {
                    s.respond(req);
                }
            }
        })?);
        Ok(Self {
            shared,
            http_addr,
            telemetry,
            threads,
        })
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn telemetry_addr(&self) -> SocketAddr {
        self.telemetry.addr()
    }

    pub fn state(&self) -> SessionState {
        self.shared.snapshot.read().clone()
    }

    pub fn bus(&self) -> &Arc<TelemetryBus> {
        &self.shared.bus
    }

    /// Runs `f` with the session locked.
    pub fn with_session<R>(&self, f: impl FnOnce(&mut Session) -> R) -> R {
        f(&mut self.shared.session.lock())
    }

    /// Same handling as the HTTP endpoint, without the socket.
    pub fn request(&self, method: &str, path: &str, body: &str, token: Option<&str>) -> HttpResponse {
        self.shared.handle(method, path, body, token)
    }

    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(mut sim) = self.shared.sim.lock().take() {
            sim.stop();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.telemetry.shutdown();
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn event_for(method: &str, path: &str, body: &Value) -> std::result::Result<Option<Event>, String> {
    let field = |name: &str| {
        body.get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| format!("body needs a string field `{name}`"))
    };
    Ok(match (method, path) {
        ("POST", "/device") => Some(Event::SelectDevice { profile: field("profile")? }),
        ("POST", "/register") => Some(Event::Register {
            display_name: field("display_name")?,
        }),
        ("POST", "/rest-capture/start") => Some(Event::StartRestCapture),
        ("POST", "/calibration/start") => Some(Event::StartCalibration),
        ("POST", "/activate") => Some(Event::Activate),
        ("POST", "/stop") => Some(Event::Stop),
        _ => None,
    })
}

impl Shared {
    fn on_message(&self, msg: &TelemetryMessage) {
        match msg {
            TelemetryMessage::StateChange { state } => {
                *self.snapshot.write() = state.clone();
                if let Some(sim) = self.sim.lock().as_ref() {
                    let _ = sim.tx.send(SimCommand::Live(*state == SessionState::Live));
                }
            }
            TelemetryMessage::CalibrationPrompt { label, marker_s, .. } => {
                if let Some(sim) = self.sim.lock().as_ref() {
                    let _ = sim.tx.send(SimCommand::Prompt {
                        label: *label,
                        marker_s: *marker_s,
                        trial_s: self.trial_s,
                    });
                }
            }
            _ => {}
        }
    }

    fn consume(&self) {
        while !self.stop.load(Ordering::Acquire) {
            let inlet = self.inlet.lock().clone();
            let Some(inlet) = inlet else {
                std::thread::sleep(Duration::from_millis(20));
                continue;
            };
            match inlet.pull_stamped(Duration::from_millis(50)) {
                Ok(Some((chunk, arrived))) => {
                    let mut session = self.session.lock();
                    let before = session.state().clone();
                    let _ = session.handle_chunk(&chunk, Some(arrived));
                    let after = session.state().clone();
                    drop(session);
                    if matches!(before, SessionState::Calibrating { .. }) && after == SessionState::Live {
                        // acquisition paused for fine-tuning; start from fresh data
                        inlet.drain();
                    }
                }
                Ok(None) => {}
                Err(_) => {
                    self.session.lock().stream_lost();
                    *self.inlet.lock() = None;
                }
            }
        }
    }

    fn connect(&self, profile: &DeviceProfile) -> Result<()> {
        if let Some(mut old) = self.sim.lock().take() {
            old.stop();
        }
        let inlet = match &self.source {
            StreamSource::Simulated(cfg) => {
                let (inlet, handle) = spawn_simulator(profile, cfg)?;
                *self.sim.lock() = Some(handle);
                inlet
            }
            StreamSource::Hub { hub, stream_id } => {
                let inlet = hub.subscribe(stream_id)?;
                if inlet.info().profile != *profile {
                    return Err(Error::Config(format!(
                        "stream `{stream_id}` carries profile `{}`, not `{}`",
                        inlet.info().profile.name,
                        profile.name
                    )));
                }
                inlet
            }
        };
        *self.inlet.lock() = Some(Arc::new(inlet));
        Ok(())
    }

    fn disconnect(&self) {
        *self.inlet.lock() = None;
        if let Some(mut sim) = self.sim.lock().take() {
            sim.stop();
        }
    }

    fn state_body(&self) -> Value {
        json!({ "protocol_version": PROTOCOL_VERSION, "state": *self.snapshot.read() })
    }

    fn handle(&self, method: &str, path: &str, body: &str, token: Option<&str>) -> HttpResponse {
        if let Some(expected) = &self.token {
            if token != Some(expected.as_str()) {
                return HttpResponse::new(401, json!({ "error": "missing or wrong token" }));
            }
        }
        match (method, path) {
            ("GET", "/state") => return HttpResponse::new(200, self.state_body()),
            ("GET", "/users") => {
                let registry = self.session.lock().registry();
                return match registry {
                    Ok(r) => HttpResponse::new(200, json!({ "protocol_version": PROTOCOL_VERSION, "users": r.users })),
                    Err(e) => HttpResponse::new(500, json!({ "error": e.to_string() })),
                };
            }
            ("GET", "/stats") => {
                let session = self.session.lock();
                let live = session.live_loop();
                return HttpResponse::new(
                    200,
                    json!({
                        "protocol_version": PROTOCOL_VERSION,
                        "telemetry_published": self.bus.published(),
                        "telemetry_dropped": self.bus.dropped(),
                        "live_ticks": live.map_or(0, |l| l.ticks),
                        "skipped_discontiguous": live.map_or(0, |l| l.skipped_discontiguous),
                    }),
                );
            }
            _ => {}
        }
        let parsed: Value = if body.trim().is_empty() {
            Value::Null
        } else {
            match serde_json::from_str(body) {
                Ok(v) => v,
                Err(e) => return HttpResponse::new(400, json!({ "error": format!("body is not JSON: {e}") })),
            }
        };
        let event = match event_for(method, path, &parsed) {
            Ok(Some(e)) => e,
            Ok(None) => return HttpResponse::new(404, json!({ "error": format!("no route {method} {path}") })),
            Err(msg) => return HttpResponse::new(400, json!({ "error": msg })),
        };
        // Reject from the snapshot so a long fine-tune does not hold the caller.
        let current = self.snapshot.read().clone();
        if let Err(e) = transition(&current, &event) {
            return HttpResponse::new(409, json!({ "error": e.to_string(), "state": current }));
        }
        let device = match &event {
            Event::SelectDevice { profile } => match DeviceProfile::by_name(profile) {
                Ok(p) => Some(p),
                Err(e) => return HttpResponse::new(400, json!({ "error": e.to_string() })),
            },
            _ => None,
        };
        let is_stop = event == Event::Stop;
        let result = self.session.lock().command(event);
        match result {
            Ok(_) => {
                if let Some(p) = device {
                    if let Err(e) = self.connect(&p) {
                        self.session.lock().stream_lost();
                        return HttpResponse::new(500, json!({ "error": e.to_string() }));
                    }
                }
                if is_stop {
                    self.disconnect();
                }
                HttpResponse::new(200, self.state_body())
            }
            Err(CommandError::Rejected(e)) => {
                HttpResponse::new(409, json!({ "error": e.to_string(), "state": e.state }))
            }
            Err(CommandError::Precondition(msg)) => {
                HttpResponse::new(409, json!({ "error": msg, "state": *self.snapshot.read() }))
            }
            Err(CommandError::Failed(e @ Error::Config(_))) => HttpResponse::new(400, json!({ "error": e.to_string() })),
            Err(CommandError::Failed(e)) => HttpResponse::new(500, json!({ "error": e.to_string() })),
        }
    }

    fn respond(&self, mut req: tiny_http::Request) {
        let method = req.method().as_str().to_uppercase();
        let path = req.url().split('?').next().unwrap_or("").to_string();
        let token = req.headers().iter().find_map(|h| {
            let name = h.field.as_str().as_str().to_ascii_lowercase();
            let value = h.value.as_str();
            match name.as_str() {
                "authorization" => value.strip_prefix("Bearer ").map(str::to_string),
                "x-auth-token" => Some(value.to_string()),
                _ => None,
            }
        });
        let mut body = String::new();
        let _ = req.as_reader().take(1 << 20).read_to_string(&mut body);
        let r = self.handle(&method, &path, &body, token.as_deref());
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
        let response = tiny_http::Response::from_string(r.body.to_string())
            .with_status_code(r.status)
            .with_header(header);
        let _ = req.respond(response);
    }
}
