use ispeech_core::personalization::{
    fine_tune_for_user, identify_user, prompt_schedule, CalibrationConfig, CalibrationRecorder, CalibrationSet,
    IdentityResult, RecordedTrial, Registry, UserProfile,
};
use ispeech_core::synth::{generate_dataset, SubjectModel, SynthParams, SynthStream};
use ispeech_core::{preprocess, ClassLabel, DecoderModel, DeviceProfile, Error, FilterState, ModelConfig, TrainConfig};
use proptest::prelude::*;

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| (*x as f64 / n) as f32).collect()
}

fn profile_for(id: String, signature: Vec<f32>) -> UserProfile {
    UserProfile {
        display_name: format!("name of {id}"),
        checkpoint_path: format!("/data/{id}.ckpt"),
        user_id: id,
        signature,
        device: "wireless".into(),
        created_at: 1_700_000_000.25,
    }
}

fn calibration_set(subject: &SubjectModel, profile: &DeviceProfile, n: usize, seed: u64) -> CalibrationSet {
    let raw = generate_dataset(subject, &ClassLabel::COMMANDS, n, 2.0, seed).unwrap();
    let trials = raw
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut st = FilterState::for_profile(profile);
            let c = ispeech_core::Chunk::new(0.0, e.n_channels, e.data.clone()).unwrap();
            let data = preprocess(&c, &mut st).unwrap().data;
            RecordedTrial {
                trial_idx: i,
                start_s: 3.0 * i as f64,
                epoch: ispeech_core::Epoch { data, ..e },
            }
        })
        .collect();
    CalibrationSet {
        trials,
        n_per_class: n,
        sampling_rate_hz: profile.sampling_rate_hz,
    }
}

proptest! {
    #[test]
    fn registry_round_trip_is_bit_exact(
        sigs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 16), 0..6),
    ) {
        let mut reg = Registry::new();
        for (i, s) in sigs.into_iter().enumerate() {
            if s.iter().all(|v| *v == 0.0) { continue; }
            reg.upsert(profile_for(format!("U{:04}", i + 1), unit(s))).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        reg.save(&path).unwrap();
        let back = Registry::load(&path).unwrap();
        prop_assert_eq!(&back, &reg);
        for (a, b) in back.users.iter().zip(&reg.users) {
            let ab: Vec<u32> = a.signature.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.signature.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }

    #[test]
    fn identification_is_scale_invariant(
        stored in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 1..5),
        probe in prop::collection::vec(-1.0f32..1.0, 8),
        exponent in -20i32..20,
        alpha in 0.01f32..100.0,
    ) {
        prop_assume!(probe.iter().any(|v| *v != 0.0));
        let mut reg = Registry::new();
        for (i, s) in stored.into_iter().enumerate() {
            if s.iter().all(|v| *v == 0.0) { continue; }
            reg.upsert(profile_for(format!("U{:04}", i + 1), unit(s))).unwrap();
        }
        let base = identify_user(&probe, &reg, 0.7);
        let pow2 = 2f32.powi(exponent);
        let scaled: Vec<f32> = probe.iter().map(|v| v * pow2).collect();
        prop_assert_eq!(identify_user(&scaled, &reg, 0.7), base.clone());
        let scaled: Vec<f32> = probe.iter().map(|v| v * alpha).collect();
        let r = identify_user(&scaled, &reg, 0.7);
        prop_assert_eq!(r.user_id(), base.user_id());
    }

    #[test]
    fn calibration_trials_are_disjoint_in_time(seed in 0u64..50, drop_every in 40usize..200) {
        let profile = DeviceProfile::wireless();
        let subject = SubjectModel::population_member(0, 1, &profile, &SynthParams::default()).unwrap();
        let config = CalibrationConfig { n_per_class: 2, seed, ..CalibrationConfig::default() };
        let mut rec = CalibrationRecorder::new(profile.n_channels(), profile.sampling_rate_hz, config).unwrap();
        let mut stream = SynthStream::new(subject, seed, ClassLabel::Rest);
        let mut filter = FilterState::for_profile(&profile);
        let mut i = 0;
        while !rec.is_complete() && i < 5000 {
            let c = stream.next_chunk(25);
            i += 1;
            if i % drop_every == 0 { continue; }
            rec.push(&preprocess(&c, &mut filter).unwrap()).unwrap();
        }
        let set = rec.finish();
        prop_assert!(set.is_complete());
        let mut spans: Vec<(f64, f64)> = set.trials.iter().map(|t| (t.start_s, t.start_s + 2.0)).collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            prop_assert!(w[1].0 >= w[0].1 - 1e-9, "{:?} overlaps {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn exact_signature_identifies_its_owner() {
    let mut reg = Registry::new();
    assert_eq!(identify_user(&[1.0, 0.0], &reg, 0.7), IdentityResult::Unknown { best_cosine: None });
    reg.upsert(profile_for("U0001".into(), unit(vec![1.0, 2.0, 3.0]))).unwrap();
    reg.upsert(profile_for("U0002".into(), unit(vec![-1.0, 0.5, 0.0]))).unwrap();
    let probe = reg.users[1].signature.clone();
    match identify_user(&probe, &reg, 0.7) {
        IdentityResult::Known { user_id, cosine } => {
            assert_eq!(user_id, "U0002");
            assert!((cosine - 1.0).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_balances_every_command() {
    let s = prompt_schedule(10, 3);
    for c in ClassLabel::COMMANDS {
        assert_eq!(s.iter().filter(|&&l| l == c).count(), 10);
    }
}

fn setup() -> (DeviceProfile, DecoderModel, CalibrationSet, tempfile::TempDir) {
    let profile = DeviceProfile::wireless();
    let subject = SubjectModel::population_member(5, 1, &profile, &SynthParams::default()).unwrap();
    let base = DecoderModel::new(ModelConfig::wireless(), 2).unwrap();
    let calib = calibration_set(&subject, &profile, 2, 9);
    (profile, base, calib, tempfile::tempdir().unwrap())
}

#[test]
fn zero_learning_rate_fine_tune_reproduces_base() {
    let (_, base, calib, dir) = setup();
    let registry = dir.path().join("registry.json");
    let user = profile_for("U0001".into(), unit(vec![1.0; 16]));
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::fine_tune()
    };
    let out = fine_tune_for_user(&base, &calib, &[], &user, &cfg, dir.path(), &registry, &mut |_, _| {}).unwrap();
    assert_eq!(std::fs::read(&out.checkpoint_path).unwrap(), base.to_checkpoint_bytes());
    let reg = Registry::load(&registry).unwrap();
    assert_eq!(reg.get("U0001").unwrap().checkpoint_path, out.checkpoint_path.to_string_lossy());
    assert_eq!(reg.get("U0001").unwrap().load_model().unwrap().to_checkpoint_bytes(), base.to_checkpoint_bytes());
}

#[test]
fn divergence_leaves_registry_untouched() {
    let (_, mut base, calib, dir) = setup();
    let registry = dir.path().join("registry.json");
    let mut reg = Registry::new();
    reg.upsert(profile_for("U0001".into(), unit(vec![1.0; 16]))).unwrap();
    reg.save(&registry).unwrap();
    let before = std::fs::read(&registry).unwrap();

    base.params_mut().by_name_mut("head.intent.bias").unwrap().value.fill(f32::INFINITY);
    let user = profile_for("U0002".into(), unit(vec![0.5; 16]));
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::fine_tune()
    };
    let err = fine_tune_for_user(&base, &calib, &[], &user, &cfg, dir.path(), &registry, &mut |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert_eq!(std::fs::read(&registry).unwrap(), before);
    assert!(!dir.path().join("U0002.ckpt").exists());
}

#[test]
fn incomplete_calibration_is_rejected() {
    let (_, base, mut calib, dir) = setup();
    calib.trials.pop();
    let user = profile_for("U0001".into(), unit(vec![1.0; 16]));
    let registry = dir.path().join("registry.json");
    let err = fine_tune_for_user(&base, &calib, &[], &user, &TrainConfig::fine_tune(), dir.path(), &registry, &mut |_, _| {})
        .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(!registry.exists());
}

#[test]
fn calibration_set_exports_as_archive() {
    let (profile, _, calib, dir) = setup();
    let archive = calib.to_archive().unwrap();
    let p = dir.path().join("calib.bin");
    archive.save(&p).unwrap();
    let back = ispeech_core::archive::EpochArchive::load(&p).unwrap();
    assert_eq!(back.epochs, calib.epochs());
    assert_eq!(back.sampling_rate_hz, profile.sampling_rate_hz);
}
