use std::path::Path;

use ispeech_core::personalization::{CalibrationConfig, Registry};
use ispeech_core::stream::Segment;
use ispeech_core::synth::{SubjectModel, SynthParams};
use ispeech_core::{ClassLabel, DecoderModel, DeviceProfile, ModelConfig, TrainConfig};
use ispeech_service::eventlog::{load_log, replay};
use ispeech_service::{
    run_headless, score_live, Clock, HeadlessReport, Session, SessionConfig, SessionScript, SessionState, SimulatedUser,
};

fn config(dir: &Path, profile: &DeviceProfile) -> SessionConfig {
    let cfg = if profile.name == "wired" { ModelConfig::wired() } else { ModelConfig::wireless() };
    let base = dir.join(format!("base-{}.ckpt", profile.name));
    DecoderModel::new(cfg, 1).unwrap().save(&base).unwrap();
    let mut s = SessionConfig {
        data_dir: dir.join("data"),
        rest_capture_s: 4.0,
        calibration: CalibrationConfig {
            n_per_class: 2,
            ..CalibrationConfig::default()
        },
        fine_tune: TrainConfig {
            epochs: 2,
            ..TrainConfig::fine_tune()
        },
        ..SessionConfig::default()
    };
    s.base_checkpoints.insert(profile.name.clone(), base);
    s
}

fn script(calibrate: bool) -> SessionScript {
    let seg = |label, duration_s| Segment { label, duration_s };
    SessionScript {
        display_name: Some("tester".into()),
        calibrate,
        live: vec![
            seg(ClassLabel::Rest, 3.0),
            seg(ClassLabel::Bored, 2.0),
            seg(ClassLabel::Rest, 3.0),
        ],
    }
}

fn run(dir: &Path, profile: &DeviceProfile, calibrate: bool) -> (HeadlessReport, SessionConfig) {
    let cfg = config(dir, profile);
    let mut session = Session::new(cfg.clone(), Clock::Fixed(5.0), Some(&dir.join("session.jsonl"))).unwrap();
    let subject = SubjectModel::population_member(0, 1, profile, &SynthParams::default()).unwrap();
    let mut user = SimulatedUser::new(subject, 3, 25);
    let report = run_headless(&mut session, &mut user, &profile.name, &script(calibrate), 10_000).unwrap();
    (report, cfg)
}

#[test]
fn full_session_visits_every_state() {
    for profile in [DeviceProfile::wireless(), DeviceProfile::wired()] {
        let dir = tempfile::tempdir().unwrap();
        let (report, cfg) = run(dir.path(), &profile, true);
        for name in [
            "idle",
            "device_select",
            "registering",
            "capturing_rest",
            "identifying",
            "calibrating",
            "fine_tuning",
            "live",
        ] {
            assert!(report.visited(name), "{}: {name} missing from {:?}", profile.name, report.states);
        }
        assert_eq!(report.final_state, Some(SessionState::Live));
        assert_eq!(report.prompts, 8);
        assert_eq!(report.commands_outside_live, 0);
        // 8 s of live signal, one event per chunk once the 2 s window fills
        assert_eq!(report.live_events.len(), 61);
        let user_id = report.user_id.clone().unwrap();
        let reg = Registry::load(&cfg.registry_path()).unwrap();
        let stored = reg.get(&user_id).unwrap();
        assert_eq!(stored.device, profile.name);
        assert!((stored.signature_norm() - 1.0).abs() < 1e-6);
        let personal = stored.load_model().unwrap();
        assert_eq!(personal.config().n_channels, profile.n_channels());

        let score = score_live(&report.live_events, 2.0, 1.0);
        assert_eq!(score.segments.len(), 1);
        assert_eq!(score.segments[0].label, ClassLabel::Bored);
        assert_eq!(score.segments[0].settled_events, 11);
    }
}

#[test]
fn log_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let profile = DeviceProfile::wireless();
    let (report, _) = run(dir.path(), &profile, false);
    let log = load_log(&dir.path().join("session.jsonl")).unwrap();
    assert_eq!(log.inference_events().len(), report.live_events.len());
    let r = replay(&log).unwrap();
    assert!(r.identical(), "{r:?}");
    assert_eq!(r.segments, 1);
    assert_eq!(r.replayed_events, report.live_events.len());
}

#[test]
fn same_seed_same_decisions() {
    let profile = DeviceProfile::wireless();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, _) = run(a.path(), &profile, false);
    let (rb, _) = run(b.path(), &profile, false);
    assert_eq!(ra.live_events.len(), rb.live_events.len());
    for (x, y) in ra.live_events.iter().zip(&rb.live_events) {
        assert_eq!(x.event.distribution, y.event.distribution);
        assert_eq!(x.event.emitted_command, y.event.emitted_command);
    }
}

#[test]
fn missing_base_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let profile = DeviceProfile::wireless();
    let mut cfg = config(dir.path(), &profile);
    cfg.base_checkpoints.clear();
    let mut session = Session::new(cfg, Clock::Fixed(0.0), None).unwrap();
    let subject = SubjectModel::population_member(0, 1, &profile, &SynthParams::default()).unwrap();
    let mut user = SimulatedUser::new(subject, 3, 25);
    let out = run_headless(&mut session, &mut user, &profile.name, &script(false), 1000);
    match out {
        Err(_) => {}
        Ok(r) => assert_ne!(r.final_state, Some(SessionState::Live)),
    }
}
