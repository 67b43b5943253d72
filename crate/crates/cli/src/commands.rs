use std::path::{Path, PathBuf};

use ispeech_core::archive::EpochArchive;
use ispeech_core::decoder::{train_supervised, TrainReport};
use ispeech_core::metrics::{fold_ranges, ConfusionMatrix, MetricsTable};
use ispeech_core::personalization::IdentityResult;
use ispeech_core::stream::{Segment, DEFAULT_CHUNK_PERIOD_S};
use ispeech_core::synth::{generate_dataset, SubjectModel, SynthParams};
use ispeech_core::{
    preprocess, Chunk, ClassLabel, DecoderModel, DeviceProfile, Epoch, Error, FilterState, ModelConfig, Result,
    TrainConfig,
};
use ispeech_service::eventlog::{load_log, replay, ReplayReport};
use ispeech_service::{
    run_headless, score_live, Clock, LiveScore, Session, SessionConfig, SessionScript, SimulatedUser,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const EPOCH_DURATION_S: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub profile: DeviceProfile,
    pub subjects: usize,
    pub first_subject: usize,
    pub trials_per_class: usize,
    pub rest_trials: usize,
    /// Root of the synthetic population; fixes every subject's anatomy.
    pub population_seed: u64,
    pub noise_seed: u64,
    pub params: SynthParams,
}

/// Applies the preprocessing chain to one epoch with a fresh filter.
pub fn preprocess_epoch(epoch: &Epoch, profile: &DeviceProfile) -> Result<Epoch> {
    let mut state = FilterState::for_profile(profile);
    let chunk = Chunk::new(0.0, epoch.n_channels, epoch.data.clone())?;
    let out = preprocess(&chunk, &mut state)?;
    Ok(Epoch {
        data: out.data,
        ..epoch.clone()
    })
}

/// Preprocessed labelled epochs for a range of population members.
pub fn synth_archive(req: &SynthRequest) -> Result<EpochArchive> {
    if req.subjects == 0 || req.trials_per_class + req.rest_trials == 0 {
        return Err(Error::Config("nothing to generate".into()));
    }
    req.params.validate()?;
    let mut epochs = Vec::new();
    for s in req.first_subject..req.first_subject + req.subjects {
        let subject = SubjectModel::population_member(s, req.population_seed, &req.profile, &req.params)?;
        let seed = req.noise_seed.wrapping_add(s as u64);
        let mut raw = generate_dataset(&subject, &ClassLabel::COMMANDS, req.trials_per_class, EPOCH_DURATION_S, seed)?;
        raw.extend(generate_dataset(&subject, &[ClassLabel::Rest], req.rest_trials, EPOCH_DURATION_S, seed)?);
        for e in &raw {
            epochs.push(preprocess_epoch(e, &req.profile)?);
        }
    }
    EpochArchive::new(req.profile.sampling_rate_hz, epochs)
}

fn check_rate(archive: &EpochArchive, profile: &DeviceProfile) -> Result<()> {
    if archive.sampling_rate_hz != profile.sampling_rate_hz {
        return Err(Error::Data(format!(
            "archive is sampled at {} Hz, the {} profile at {} Hz",
            archive.sampling_rate_hz, profile.name, profile.sampling_rate_hz
        )));
    }
    Ok(())
}

pub fn pretrain(
    archive: &EpochArchive,
    profile: &DeviceProfile,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(DecoderModel, TrainReport)> {
    check_rate(archive, profile)?;
    let mut m = DecoderModel::new(model.clone(), train.seed)?;
    let report = train_supervised(&mut m, &archive.epochs, train)?;
    Ok((m, report))
}

/// Sidecar path of the training report written next to a checkpoint.
pub fn report_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

/// Per-class metrics of four-command predictions over `folds` seeded
/// random partitions.
pub fn evaluate_predictions(truth: &[ClassLabel], predicted: &[ClassLabel], folds: usize, seed: u64) -> Result<MetricsTable> {
    if truth.len() != predicted.len() {
        return Err(Error::Data(format!("{} labels but {} predictions", truth.len(), predicted.len())));
    }
    if truth.is_empty() {
        return Err(Error::Data("no command trials to evaluate".into()));
    }
    if folds == 0 || folds > truth.len() {
        return Err(Error::Config(format!("cannot split {} trials into {folds} folds", truth.len())));
    }
    let index = |l: ClassLabel| {
        ClassLabel::COMMANDS
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::Data(format!("{l} is not a command class")))
    };
    let t: Vec<usize> = truth.iter().map(|&l| index(l)).collect::<Result<_>>()?;
    let p: Vec<usize> = predicted.iter().map(|&l| index(l)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut matrices = Vec::with_capacity(folds);
    for r in fold_ranges(order.len(), folds) {
        let mut m = ConfusionMatrix::new(ClassLabel::COMMANDS.len());
        for &i in &order[r] {
            m.add(t[i], p[i])?;
        }
        matrices.push(m);
    }
    MetricsTable::from_folds(&ClassLabel::COMMANDS, matrices)
}

/// Command-restricted predictions of `model` on every command trial.
pub fn predict_commands(model: &DecoderModel, archive: &EpochArchive) -> Result<(Vec<ClassLabel>, Vec<ClassLabel>)> {
    let cfg = model.config();
    let trials: Vec<&Epoch> = archive
        .epochs
        .iter()
        .filter(|e| e.label.is_some_and(ClassLabel::is_command))
        .collect();
    if let Some(e) = trials.iter().find(|e| e.n_channels != cfg.n_channels || e.n_samples != cfg.window_samples) {
        return Err(Error::Data(format!(
            "archive epochs are {}x{}, model expects {}x{}",
            e.n_channels, e.n_samples, cfg.n_channels, cfg.window_samples
        )));
    }
    let windows: Vec<&[f32]> = trials.iter().map(|e| e.data.as_slice()).collect();
    let out = model.infer_many(&windows, 32)?;
    let truth = trials.iter().map(|e| e.label.expect("filtered")).collect();
    let predicted = out.iter().map(|(d, _)| d.command_argmax()).collect();
    Ok((truth, predicted))
}

pub fn evaluate(model: &DecoderModel, archive: &EpochArchive, folds: usize, seed: u64) -> Result<MetricsTable> {
    let (truth, predicted) = predict_commands(model, archive)?;
    evaluate_predictions(&truth, &predicted, folds, seed)
}

/// Session used by `simulate-session` when no script is given.
pub fn default_script() -> SessionScript {
    let seg = |label, duration_s| Segment { label, duration_s };
    let mut live = vec![seg(ClassLabel::Rest, 6.0)];
    for c in ClassLabel::COMMANDS {
        live.push(seg(c, 4.0));
        live.push(seg(ClassLabel::Rest, 4.0));
    }
    SessionScript {
        display_name: Some("operator".into()),
        calibrate: true,
        live,
    }
}

#[derive(Debug, Clone)]
pub struct SimulationRequest {
    pub profile: DeviceProfile,
    pub base_checkpoint: PathBuf,
    pub script: SessionScript,
    pub session: SessionConfig,
    pub population_seed: u64,
    pub subject_index: usize,
    pub noise_seed: u64,
    pub params: SynthParams,
    pub log_path: PathBuf,
    pub clock: Clock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub device: String,
    pub subject_id: String,
    pub user_id: Option<String>,
    pub identity: Option<IdentityResult>,
    pub states: Vec<String>,
    pub final_state: Option<String>,
    pub prompts: usize,
    pub chunks: usize,
    pub live_events: usize,
    pub commands_emitted: usize,
    pub commands_outside_live: usize,
    pub score: LiveScore,
    pub mean_latency_ms: f64,
    pub log_path: PathBuf,
}

/// Runs one complete operator session against a simulated subject without
/// wall-clock pacing.
pub fn simulate_session(req: &SimulationRequest) -> Result<SimulationSummary> {
    let mut config = req.session.clone();
    config
        .base_checkpoints
        .insert(req.profile.name.clone(), req.base_checkpoint.clone());
    if let Some(dir) = req.log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let live_cfg = config.live.clone();
    let mut session = Session::new(config, req.clock, Some(&req.log_path))?;
    let subject = SubjectModel::population_member(req.subject_index, req.population_seed, &req.profile, &req.params)?;
    let chunk_samples = (DEFAULT_CHUNK_PERIOD_S * req.profile.sampling_rate_hz as f64).round() as usize;
    let mut user = SimulatedUser::new(subject.clone(), req.noise_seed, chunk_samples);
    let report = run_headless(&mut session, &mut user, &req.profile.name, &req.script, 1 << 20)?;
    let score = score_live(&report.live_events, live_cfg.window_s, 1.0);
    let n = report.live_events.len();
    Ok(SimulationSummary {
        device: req.profile.name.clone(),
        subject_id: subject.subject_id,
        user_id: report.user_id.clone(),
        identity: report.identity.clone(),
        states: report.states.iter().map(|s| s.name().to_string()).collect(),
        final_state: report.final_state.as_ref().map(|s| s.name().to_string()),
        prompts: report.prompts,
        chunks: report.chunks,
        live_events: n,
        commands_emitted: report
            .live_events
            .iter()
            .filter(|e| e.event.emitted_command.is_some())
            .count(),
        commands_outside_live: report.commands_outside_live,
        score,
        mean_latency_ms: if n == 0 {
            0.0
        } else {
            report.live_events.iter().map(|e| e.event.latency_ms).sum::<f64>() / n as f64
        },
        log_path: req.log_path.clone(),
    })
}

pub fn replay_log(path: &Path) -> Result<ReplayReport> {
    replay(&load_log(path)?)
}
