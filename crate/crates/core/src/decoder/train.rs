use std::collections::{BTreeMap, BTreeSet};

use ispeech_neural::{Adam, AdamConfig, ParamStore, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::model::Decoder;
use crate::error::{Error, Result};
use crate::signal::{ClassLabel, Epoch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Weight of the intent cross-entropy.
    pub intent_weight: f64,
    /// Weight of the subject-classification loss on the signature head.
    /// Only applied when the epochs come from at least two subjects.
    pub identity_weight: f64,
    /// Logit scale applied to unit signatures in the subject classifier.
    pub identity_scale: f64,
    /// Fraction of epochs held out for evaluation.
    pub holdout_fraction: f64,
    /// Stop once inference-mode training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            intent_weight: 1.0,
            identity_weight: 1.0,
            identity_scale: 10.0,
            holdout_fraction: 0.0,
            target_train_accuracy: None,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            epochs: 40,
            lr: 1e-4,
            ..Self::pretrain()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        let finite = [self.lr, self.beta1, self.beta2, self.eps, self.intent_weight, self.identity_weight];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("optimizer settings and loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub n_epochs: usize,
    /// Accuracy over every intent class.
    pub accuracy: f64,
    /// Accuracy on command trials with the argmax restricted to commands.
    pub command_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_intent_losses: Vec<f64>,
    pub epoch_identity_losses: Vec<f64>,
    /// Accuracy of the training forward passes (dropout active).
    pub epoch_train_accuracy: Vec<f64>,
    /// Inference-mode training accuracy, when a target was set.
    pub final_train_accuracy: Option<f64>,
    pub holdout: Option<HoldoutReport>,
    pub subjects: Vec<String>,
    pub identity_loss_applied: bool,
}

fn check_dataset<T: Scalar>(model: &Decoder<T>, epochs: &[Epoch]) -> Result<Vec<usize>> {
    if epochs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.config();
    let mut labels = Vec::with_capacity(epochs.len());
    for (i, e) in epochs.iter().enumerate() {
        if e.n_channels != cfg.n_channels || e.n_samples != cfg.window_samples {
            return Err(Error::Data(format!(
                "epoch {i} is {}x{}, model expects {}x{}",
                e.n_channels, e.n_samples, cfg.n_channels, cfg.window_samples
            )));
        }
        let label = e.label.ok_or_else(|| Error::Data(format!("epoch {i} has no label")))?;
        if label.index() >= cfg.n_intent_classes {
            return Err(Error::Data(format!(
                "label {label} outside the model's {} classes",
                cfg.n_intent_classes
            )));
        }
        labels.push(label.index());
    }
    Ok(labels)
}

/// Accuracy over all classes and over command trials (command-restricted
/// argmax) for `epochs` under inference mode.
pub fn evaluate_accuracy<T: Scalar>(model: &Decoder<T>, epochs: &[Epoch]) -> Result<HoldoutReport> {
    let windows: Vec<&[f32]> = epochs.iter().map(|e| e.data.as_slice()).collect();
    let out = model.infer_many(&windows, 32)?;
    let mut correct = 0usize;
    let mut cmd_total = 0usize;
    let mut cmd_correct = 0usize;
    for (e, (dist, _)) in epochs.iter().zip(&out) {
        let label = e.label.ok_or_else(|| Error::Data("unlabelled evaluation epoch".into()))?;
        if dist.argmax == label {
            correct += 1;
        }
        if label.is_command() {
            cmd_total += 1;
            if dist.command_argmax() == label {
                cmd_correct += 1;
            }
        }
    }
    Ok(HoldoutReport {
        n_epochs: epochs.len(),
        accuracy: correct as f64 / epochs.len().max(1) as f64,
        command_accuracy: (cmd_total > 0).then(|| cmd_correct as f64 / cmd_total as f64),
    })
}

fn batch_tensor<T: Scalar>(epochs: &[Epoch], idx: &[usize]) -> Result<Tensor<T>> {
    let (c, t) = (epochs[idx[0]].n_channels, epochs[idx[0]].n_samples);
    let mut data = Vec::with_capacity(idx.len() * c * t);
    for &i in idx {
        data.extend(epochs[i].data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::from_vec(&[idx.len(), c, t], data)?)
}

/// Mini-batch Adam on mean cross-entropy of the intent head, optionally
/// joined by a subject-classification loss on the signature head.
/// Deterministic in `config.seed`.
pub fn train_supervised<T: Scalar>(
    model: &mut Decoder<T>,
    epochs: &[Epoch],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_supervised_with_progress(model, epochs, config, &mut |_, _| {})
}

/// As [`train_supervised`], calling `on_epoch(epochs_done, mean_loss)` after
/// every epoch.
pub fn train_supervised_with_progress<T: Scalar>(
    model: &mut Decoder<T>,
    epochs: &[Epoch],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    let labels = check_dataset(model, epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..epochs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (epochs.len() as f64 * config.holdout_fraction).floor() as usize;
    let (train_idx, hold_idx) = order.split_at(epochs.len() - n_hold);
    let mut train_idx = train_idx.to_vec();
    let hold_idx = hold_idx.to_vec();
    if train_idx.is_empty() {
        return Err(Error::Data("holdout leaves no training epochs".into()));
    }

    let subjects: Vec<String> = epochs
        .iter()
        .filter_map(|e| e.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let subject_of: Vec<Option<usize>> = epochs
        .iter()
        .map(|e| e.subject_id.as_ref().map(|s| subjects.binary_search(s).expect("known subject")))
        .collect();
    let use_identity = config.identity_weight > 0.0 && subjects.len() >= 2;
    if use_identity {
        if subject_of.iter().any(Option::is_none) {
            return Err(Error::Data("identity training needs a subject id on every epoch".into()));
        }
    }

    let sig_dim = model.config().signature_dim;
    let mut id_store: ParamStore<T> = ParamStore::new();
    if use_identity {
        id_store.insert(
            "identity.weight",
            Tensor::randn(&[sig_dim, subjects.len()], 1.0 / (sig_dim as f64).sqrt(), &mut rng),
        )?;
    }
    let mut opt = Adam::new(config.adam(), model.params());
    let mut id_opt = Adam::new(config.adam(), &id_store);

    let mut report = TrainReport {
        epochs_run: 0,
        steps: 0,
        epoch_losses: Vec::new(),
        epoch_intent_losses: Vec::new(),
        epoch_identity_losses: Vec::new(),
        epoch_train_accuracy: Vec::new(),
        final_train_accuracy: None,
        holdout: None,
        subjects: subjects.clone(),
        identity_loss_applied: use_identity,
    };
    let train_epochs: Vec<Epoch> = train_idx.iter().map(|&i| epochs[i].clone()).collect();

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let (mut total, mut intent_total, mut id_total) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        for batch in train_idx.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars = model.params().bind(&tape);
            let id_vars = id_store.bind(&tape);
            let x = tape.constant(batch_tensor::<T>(epochs, batch)?);
            let out = model.forward_graph(&vars, x, Some(&mut rng))?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            {
                let logits = out.intent_logits.value();
                let k = model.config().n_intent_classes;
                for (row, &label) in logits.data().chunks_exact(k).zip(&y) {
                    let mut best = 0;
                    for j in 1..k {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    correct += usize::from(best == label);
                }
            }
            let intent = out.intent_logits.cross_entropy(&y)?;
            let intent_value = intent.value().data()[0].as_f64();
            let mut loss = intent.scale(T::from_f64_lossy(config.intent_weight));
            let mut id_value = 0.0;
            if use_identity {
                let ys: Vec<usize> = batch.iter().map(|&i| subject_of[i].expect("checked")).collect();
                let id_logits = out
                    .signature
                    .matmul(id_vars[0])?
                    .scale(T::from_f64_lossy(config.identity_scale));
                let id_loss = id_logits.cross_entropy(&ys)?;
                id_value = id_loss.value().data()[0].as_f64();
                loss = loss.add(id_loss.scale(T::from_f64_lossy(config.identity_weight)))?;
            }
            let loss_value = loss.value().data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss_value,
                });
            }
            tape.backward(loss)?;
            model.params_mut().zero_grad();
            model.params_mut().accumulate_grads(&tape, &vars);
            opt.step(model.params_mut());
            if use_identity {
                id_store.zero_grad();
                id_store.accumulate_grads(&tape, &id_vars);
                id_opt.step(&mut id_store);
            }
            report.steps += 1;
            let w = batch.len() as f64;
            total += loss_value * w;
            intent_total += intent_value * w;
            id_total += id_value * w;
        }
        if !model.params().all_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let n = train_idx.len() as f64;
        report.epoch_losses.push(total / n);
        report.epoch_intent_losses.push(intent_total / n);
        report.epoch_identity_losses.push(id_total / n);
        report.epoch_train_accuracy.push(correct as f64 / n);
        report.epochs_run = epoch + 1;
        on_epoch(epoch + 1, total / n);
        if let Some(target) = config.target_train_accuracy {
            let acc = evaluate_accuracy(model, &train_epochs)?.accuracy;
            report.final_train_accuracy = Some(acc);
            if acc >= target {
                break;
            }
        }
    }

    if !hold_idx.is_empty() {
        let hold: Vec<Epoch> = hold_idx.iter().map(|&i| epochs[i].clone()).collect();
        report.holdout = Some(evaluate_accuracy(model, &hold)?);
    }
    Ok(report)
}

/// Number of epochs per label.
pub fn class_counts(epochs: &[Epoch]) -> BTreeMap<ClassLabel, usize> {
    let mut m = BTreeMap::new();
    for e in epochs {
        if let Some(l) = e.label {
            *m.entry(l).or_insert(0) += 1;
        }
    }
    m
}
