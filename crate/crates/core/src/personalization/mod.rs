//! Registry, resting-state identification, calibration capture and per-user
//! fine-tuning.

pub mod calibration;
pub mod capture;
pub mod finetune;
pub mod identify;
pub mod registry;

pub use calibration::{
    prompt_schedule, run_calibration, CalibrationConfig, CalibrationEvent, CalibrationRecorder, CalibrationSet,
    RecordedTrial,
};
pub use capture::{capture_resting_signature, signature_from_windows, RestCapture, RestSignature, REST_CAPTURE_S};
pub use finetune::{fine_tune_dataset, fine_tune_for_user, FineTuneOutcome};
pub use identify::{cosine, identify_user, IdentityResult, DEFAULT_IDENTITY_THRESHOLD};
pub use registry::{Registry, UserProfile, REGISTRY_VERSION};
