use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::decoder::{train_supervised_with_progress, DecoderModel, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::personalization::calibration::CalibrationSet;
use crate::personalization::registry::{Registry, UserProfile};
use crate::signal::{ClassLabel, Epoch};

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub checkpoint_path: PathBuf,
    pub report: TrainReport,
    pub wall_clock_s: f64,
    pub model: DecoderModel,
}

/// Training epochs for a personal model: the calibration trials plus the
/// resting-state windows labelled REST.
pub fn fine_tune_dataset(calib: &CalibrationSet, rest_windows: &[Vec<f32>], n_channels: usize) -> Result<Vec<Epoch>> {
    let mut epochs = calib.epochs();
    for w in rest_windows {
        epochs.push(Epoch::new(n_channels, w.clone(), Some(ClassLabel::Rest), None)?);
    }
    Ok(epochs)
}

/// Copies `base`, trains it on the calibration set, writes the checkpoint to
/// `checkpoint_dir/<user_id>.ckpt` and records it in the registry at
/// `registry_path`. On any failure the registry file is left untouched.
/// `on_epoch` receives training progress.
pub fn fine_tune_for_user(
    base: &DecoderModel,
    calib: &CalibrationSet,
    rest_windows: &[Vec<f32>],
    user: &UserProfile,
    config: &TrainConfig,
    checkpoint_dir: &Path,
    registry_path: &Path,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<FineTuneOutcome> {
    if !calib.is_complete() {
        return Err(Error::Data(format!(
            "calibration set is incomplete: {:?} of {} per class",
            calib.counts(),
            calib.n_per_class
        )));
    }
    let started = Instant::now();
    let mut model = base.clone();
    let epochs = fine_tune_dataset(calib, rest_windows, base.config().n_channels)?;
    let report = train_supervised_with_progress(&mut model, &epochs, config, on_epoch)?;

    std::fs::create_dir_all(checkpoint_dir)?;
    let checkpoint_path = checkpoint_dir.join(format!("{}.ckpt", user.user_id));
    model.save(&checkpoint_path)?;

    let mut registry = Registry::load(registry_path)?;
    let mut updated = user.clone();
    updated.checkpoint_path = checkpoint_path.to_string_lossy().into_owned();
    registry.upsert(updated)?;
    registry.save(registry_path)?;

    Ok(FineTuneOutcome {
        checkpoint_path,
        report,
        wall_clock_s: started.elapsed().as_secs_f64(),
        model,
    })
}
