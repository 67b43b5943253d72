//! In-process stream transport: a hub of outlets and inlets, the sample ring
//! buffer with its decision-window extractor, and the device simulator.

pub mod hub;
pub mod ring;
pub mod sim;

pub use hub::{DropPolicy, Hub, Inlet, Outlet, StreamInfo, DEFAULT_CHUNK_PERIOD_S};
pub use ring::{window_samples, RingBuffer, SharedRingBuffer, WindowView, DEFAULT_CAPACITY_S, DEFAULT_WINDOW_S};
pub use sim::{run_simulator, LabelMarker, Pace, Pacer, Segment, SimReport, SimScript};
