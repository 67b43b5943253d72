//! Session orchestration for the decoding workbench: the workflow state
//! machine, the real-time loop, the session log, and the control and
//! telemetry interfaces.

pub mod eventlog;
pub mod headless;
pub mod live;
pub mod protocol;
pub mod service;
pub mod session;
pub mod sim_user;
pub mod state;
pub mod telemetry;

pub use headless::{run_headless, score_live, HeadlessReport, LabelledEvent, LiveScore, SegmentScore, SessionScript};
pub use live::{LiveConfig, LiveLoop};
pub use protocol::{Envelope, InferenceEvent, SignalFrame, TelemetryMessage, PROTOCOL_VERSION};
pub use service::{Service, ServiceConfig, SimulatedSource, StreamSource};
pub use session::{Clock, CommandError, Session, SessionConfig};
pub use sim_user::SimulatedUser;
pub use state::{transition, Event, SessionState, TransitionError};
