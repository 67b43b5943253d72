//! Command-line front end: synthetic data, pre-training, evaluation,
//! headless sessions, the operator service and log replay.

pub mod commands;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use ispeech_core::archive::EpochArchive;
use ispeech_core::{DecoderModel, DeviceProfile, Error, Result};
use ispeech_service::{Clock, Service, ServiceConfig, SessionScript, SimulatedSource, StreamSource};
use serde::Serialize;

pub use commands::*;
pub use config::AppConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Structured,
}

#[derive(Debug, Parser)]
#[command(name = "ispeech", version, about = "Imagined-speech EEG workbench")]
pub struct Cli {
    /// JSON settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Device profile: wired or wireless.
    #[arg(long, global = true, default_value = "wireless")]
    pub device: String,
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a preprocessed labelled epoch archive.
    Synth {
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 20)]
        trials_per_class: usize,
        /// REST epochs per subject; defaults to the per-class count.
        #[arg(long)]
        rest_trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        first_subject: usize,
        #[arg(long, default_value_t = 1)]
        population_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base decoder on an epoch archive.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-fold metrics of a checkpoint on the command trials of an archive.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        /// Also write the structured metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full session against a simulated subject, without pacing.
    SimulateSession {
        /// Base checkpoint for the selected device.
        #[arg(long)]
        base: PathBuf,
        /// Session script (JSON); a demo session when absent.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        subject_seed: u64,
        #[arg(long, default_value_t = 0)]
        subject_index: usize,
        /// Registry and checkpoints; defaults to `<out>/data`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the control API and telemetry with a simulated headset.
    Serve {
        /// Base checkpoint for the selected device.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7480")]
        http: String,
        #[arg(long, default_value = "127.0.0.1:7481")]
        telemetry: String,
        #[arg(long)]
        token: Option<String>,
        #[arg(long, default_value_t = 1)]
        subject_seed: u64,
        #[arg(long, default_value_t = 0)]
        subject_index: usize,
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many seconds; run until killed when absent.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Re-run the live decisions of a session log and compare them.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Json(_) => 3,
        _ => 4,
    }
}

fn render<T: Serialize>(format: ReportFormat, value: &T, text: impl FnOnce() -> String) -> String {
    match format {
        ReportFormat::Text => text(),
        ReportFormat::Structured => serde_json::to_string_pretty(value).expect("report serializes"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ispeech_core::fsutil::atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_archive(path: &Path) -> Result<EpochArchive> {
    EpochArchive::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn load_model(path: &Path) -> Result<DecoderModel> {
    DecoderModel::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

#[derive(Serialize)]
struct SynthOutput<'a> {
    path: &'a Path,
    epochs: usize,
    subjects: usize,
    n_channels: usize,
    n_samples: usize,
    sampling_rate_hz: u32,
}

/// Executes `cli` and returns the report to print.
pub fn run(cli: &Cli) -> Result<String> {
    let app = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    let profile = DeviceProfile::by_name(&cli.device)?;
    match &cli.command {
        Command::Synth {
            subjects,
            trials_per_class,
            rest_trials,
            first_subject,
            population_seed,
            out,
        } => {
            let archive = synth_archive(&SynthRequest {
                profile: profile.clone(),
                subjects: *subjects,
                first_subject: *first_subject,
                trials_per_class: *trials_per_class,
                rest_trials: rest_trials.unwrap_or(*trials_per_class),
                population_seed: *population_seed,
                noise_seed: cli.seed,
                params: app.synth,
            })?;
            archive.save(out)?;
            let first = &archive.epochs[0];
            let o = SynthOutput {
                path: out,
                epochs: archive.epochs.len(),
                subjects: *subjects,
                n_channels: first.n_channels,
                n_samples: first.n_samples,
                sampling_rate_hz: archive.sampling_rate_hz,
            };
            Ok(render(cli.report, &o, || {
                format!(
                    "wrote {} epochs from {} subjects ({} ch x {} samples at {} Hz) to {}\n",
                    o.epochs,
                    o.subjects,
                    o.n_channels,
                    o.n_samples,
                    o.sampling_rate_hz,
                    out.display()
                )
            }))
        }
        Command::Pretrain { data, out } => {
            let archive = load_archive(data)?;
            let model_cfg = app.model_for(&profile)?;
            let train = ispeech_core::TrainConfig {
                seed: cli.seed,
                ..app.train.clone()
            };
            let (model, report) = pretrain(&archive, &profile, &model_cfg, &train)?;
            model.save(out)?;
            write_json(&report_path(out), &report)?;
            Ok(render(cli.report, &report, || {
                let mut s = String::new();
                let _ = writeln!(
                    s,
                    "trained {} epochs ({} steps) on {} trials from {} subjects",
                    report.epochs_run,
                    report.steps,
                    archive.epochs.len(),
                    report.subjects.len()
                );
                if let Some(l) = report.epoch_losses.last() {
                    let _ = writeln!(s, "final loss {l:.4}");
                }
                if let Some(h) = &report.holdout {
                    let _ = writeln!(s, "holdout accuracy {:.3} on {} trials", h.accuracy, h.n_epochs);
                }
                let _ = writeln!(s, "checkpoint {}", out.display());
                s
            }))
        }
        Command::Evaluate {
            checkpoint,
            data,
            folds,
            out,
        } => {
            let model = load_model(checkpoint)?;
            let archive = load_archive(data)?;
            let table = evaluate(&model, &archive, *folds, cli.seed)?;
            if let Some(p) = out {
                write_json(p, &table)?;
            }
            Ok(match cli.report {
                ReportFormat::Text => table.render_text(),
                ReportFormat::Structured => table.render_structured(),
            })
        }
        Command::SimulateSession {
            base,
            script,
            subject_seed,
            subject_index,
            data_dir,
            out,
        } => {
            let script = match script {
                Some(p) => SessionScript::from_json(
                    &std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read script {}: {e}", p.display())))?,
                )
                .map_err(|e| Error::Config(format!("script {}: {e}", p.display())))?,
                None => default_script(),
            };
            let mut session = app.session.clone();
            session.data_dir = data_dir.clone().unwrap_or_else(|| out.join("data"));
            let summary = simulate_session(&SimulationRequest {
                profile: profile.clone(),
                base_checkpoint: base.clone(),
                script,
                session,
                population_seed: *subject_seed,
                subject_index: *subject_index,
                noise_seed: cli.seed,
                params: app.synth,
                log_path: out.join("session.jsonl"),
                clock: Clock::System,
            })?;
            write_json(&out.join("summary.json"), &summary)?;
            Ok(render(cli.report, &summary, || render_summary(&summary)))
        }
        Command::Serve {
            base,
            http,
            telemetry,
            token,
            subject_seed,
            subject_index,
            pace,
            log,
            duration_s,
        } => {
            let mut session = app.session.clone();
            session.base_checkpoints.insert(profile.name.clone(), base.clone());
            let source = SimulatedSource {
                subject_seed: *subject_seed,
                subject_index: *subject_index,
                noise_seed: cli.seed,
                pace_factor: *pace,
                ..SimulatedSource::default()
            };
            let mut cfg = ServiceConfig::new(session, StreamSource::Simulated(source));
            cfg.http_addr = http.clone();
            cfg.telemetry_addr = telemetry.clone();
            cfg.token = token.clone();
            cfg.log_path = log.clone();
            let mut service = Service::start(cfg)?;
            println!(
                "control api http://{}  telemetry tcp://{}",
                service.http_addr(),
                service.telemetry_addr()
            );
            match duration_s {
                Some(d) => std::thread::sleep(Duration::from_secs_f64(d.max(0.0))),
                None => loop {
                    std::thread::park();
                },
            }
            service.shutdown();
            Ok(format!("stopped in state {}\n", service.state().name()))
        }
        Command::Replay { log } => {
            let r = replay_log(log)?;
            let text = format!(
                "{} live segments, {} chunks, {} logged and {} replayed events: {}\n",
                r.segments,
                r.chunks,
                r.logged_events,
                r.replayed_events,
                if r.identical() { "identical" } else { "DIVERGED" }
            );
            if !r.identical() {
                return Err(Error::Data(format!(
                    "replay diverged at event {}",
                    r.first_mismatch.map_or("(count)".to_string(), |i| i.to_string())
                )));
            }
            Ok(text)
        }
    }
}

pub fn render_summary(s: &SimulationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "device {} subject {} user {}", s.device, s.subject_id, s.user_id.as_deref().unwrap_or("-"));
    let _ = writeln!(out, "states {}", s.states.join(" -> "));
    let _ = writeln!(out, "calibration prompts {}  chunks {}", s.prompts, s.chunks);
    let _ = writeln!(
        out,
        "live events {}  commands {}  false commands on REST {}/{}",
        s.live_events, s.commands_emitted, s.score.rest_commands, s.score.rest_events
    );
    for seg in &s.score.segments {
        let _ = writeln!(
            out,
            "  {:<3} {:>2}/{:<2} correct after 1 s, first at {}",
            seg.label.code(),
            seg.settled_correct,
            seg.settled_events,
            seg.first_correct_s.map_or("-".to_string(), |t| format!("{t:.1} s"))
        );
    }
    let _ = writeln!(out, "log {}", s.log_path.display());
    out
}
