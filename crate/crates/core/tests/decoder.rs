use std::time::Instant;

use ispeech_core::decoder::{train_supervised, Forward};
use ispeech_core::synth::{generate_dataset, SubjectModel, SynthParams};
use ispeech_core::{
    preprocess, Chunk, ClassLabel, Decoder, DecoderModel, DeviceProfile, Epoch, FilterState, ModelConfig, TrainConfig,
};
use ispeech_neural::gradcheck::{check_gradients, GradCheckReport};
use ispeech_neural::{Tape, Tensor, Tensor32, Tensor64, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-2;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_channels: 3,
        window_samples: 20,
        patch_len: 5,
        patch_stride: 5,
        d_model: 8,
        n_heads: 2,
        n_temporal_layers: 1,
        n_spatial_layers: 1,
        rel_pos_max_offset: 2,
        n_intent_classes: 5,
        signature_dim: 4,
        ffn_dim: 8,
        dropout: 0.0,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = tape.constant(randn(&y.shape(), seed));
    y.mul(w).unwrap().sum()
}

/// Gradient check over every parameter plus one extra input fed to `stage`.
fn check_stage(
    model: &Decoder<f64>,
    input: Tensor64,
    stage: impl for<'t> Fn(&Decoder<f64>, &'t Tape<f64>, &[Var<'t, f64>], Var<'t, f64>) -> Var<'t, f64>,
) -> GradCheckReport {
    let mut inputs: Vec<Tensor64> = model.params().iter().map(|p| p.value.clone()).collect();
    let n = inputs.len();
    inputs.push(input);
    check_gradients(&inputs, |t, v| stage(model, t, &v[..n], v[n]), EPS, TOL, None)
}

fn assert_report(name: &str, r: &GradCheckReport) {
    assert!(
        r.fraction_agreeing() >= 0.99,
        "{name}: {}/{} agree, worst {:.3e}",
        r.agreeing,
        r.checked,
        r.worst_relative_error
    );
}

fn heads_loss<'t>(t: &'t Tape<f64>, f: Forward<'t, f64>) -> Var<'t, f64> {
    let ce = f.intent_logits.cross_entropy(&[1, 4]).unwrap();
    ce.add(project(t, f.signature, 77)).unwrap()
}

#[test]
fn gradient_check_every_stage_and_full_decoder() {
    let model = Decoder::<f64>::new(tiny(), 5).unwrap();
    let cfg = tiny();
    let (b, c, d, l) = (2, cfg.n_channels, cfg.d_model, cfg.n_patches());

    let r = check_stage(&model, randn(&[b, c, cfg.window_samples], 1), |m, t, v, x| {
        project(t, m.patchify_graph(v, x).unwrap(), 2)
    });
    assert_report("patch embedding", &r);

    let r = check_stage(&model, randn(&[b * c, l, d], 3), |m, t, v, x| {
        project(t, m.temporal_graph(v, x, &mut None).unwrap(), 4)
    });
    assert_report("temporal encoder", &r);

    let r = check_stage(&model, randn(&[b, c, d], 5), |m, t, v, x| {
        project(t, m.spatial_graph(v, x, &mut None).unwrap(), 6)
    });
    assert_report("spatial encoder", &r);

    let r = check_stage(&model, randn(&[b, d], 7), |m, t, v, x| heads_loss(t, m.heads_graph(v, x).unwrap()));
    assert_report("heads", &r);

    let r = check_stage(&model, randn(&[b, c, cfg.window_samples], 8), |m, t, v, x| {
        heads_loss(t, m.forward_graph(v, x, None).unwrap())
    });
    assert_report("full decoder", &r);
    assert!(r.checked > model.parameter_count());
}

#[test]
fn size_and_latency_budget() {
    for cfg in [ModelConfig::wired(), ModelConfig::wireless()] {
        let m = DecoderModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
        assert!(m.parameter_count() < 1_000_000);
        let w = m.random_window(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        m.forward_intent(&w).unwrap();
        let t = Instant::now();
        for _ in 0..5 {
            m.forward_intent(&w).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / 5.0;
        assert!(per < 0.1, "{} ch: {per:.3} s per window", cfg.n_channels);
    }
    assert_eq!(ModelConfig::wired().n_patches(), 20);
}

#[test]
fn untrained_distribution_is_near_uniform() {
    let m = DecoderModel::new(ModelConfig::wireless(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let windows: Vec<Vec<f32>> = (0..100).map(|_| m.random_window(&mut rng, 1.0)).collect();
    let refs: Vec<&[f32]> = windows.iter().map(Vec::as_slice).collect();
    let out = m.infer_many(&refs, 25).unwrap();
    let mut mean = [0.0; 5];
    for (d, sig) in &out {
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let norm = sig.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);
        for (k, p) in d.probabilities.iter().enumerate() {
            mean[k] += p / 100.0;
        }
    }
    for p in mean {
        assert!((0.1..=0.3).contains(&p), "{mean:?}");
    }
    let again = m.forward_intent(&windows[0]).unwrap();
    assert_eq!(again, out[0].0);
}

#[test]
fn encoder_outputs_bounded_at_init() {
    let cfg = ModelConfig::wireless();
    let bound = 10.0 * (cfg.d_model as f64).sqrt();
    for seed in 0..100 {
        let m = DecoderModel::new(cfg.clone(), seed).unwrap();
        let w = m.random_window(&mut ChaCha8Rng::seed_from_u64(seed + 1000), 1.0);
        let summaries = m.temporal_encode(&m.patchify(&w).unwrap()).unwrap();
        let pooled = m.spatial_encode(&summaries).unwrap();
        assert!(summaries.is_finite() && pooled.is_finite());
        for row in summaries.data().chunks(cfg.d_model) {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!(n <= bound, "seed {seed}: temporal norm {n}");
        }
        assert!(pooled.l2_norm() <= bound, "seed {seed}");
    }
}

#[test]
fn patch_embedding_properties() {
    let cfg = ModelConfig::wireless();
    let m = DecoderModel::new(cfg.clone(), 3).unwrap();
    let zero = vec![0.0f32; cfg.n_channels * cfg.window_samples];
    assert!(m.patchify(&zero).unwrap().data().iter().all(|v| *v == 0.0));

    let w = m.random_window(&mut ChaCha8Rng::seed_from_u64(4), 1.0);
    let perm: Vec<usize> = (0..cfg.n_channels).rev().collect();
    let t = cfg.window_samples;
    let mut permuted = Vec::with_capacity(w.len());
    for &ch in &perm {
        permuted.extend_from_slice(&w[ch * t..(ch + 1) * t]);
    }
    let a = m.patchify(&w).unwrap();
    let b = m.patchify(&permuted).unwrap();
    let per = cfg.n_patches() * cfg.d_model;
    for (i, &ch) in perm.iter().enumerate() {
        assert_eq!(&b.data()[i * per..(i + 1) * per], &a.data()[ch * per..(ch + 1) * per]);
    }
}

#[test]
fn temporal_encoder_properties() {
    let cfg = ModelConfig::wireless();
    let m = DecoderModel::new(cfg.clone(), 6).unwrap();
    let mut w = m.random_window(&mut ChaCha8Rng::seed_from_u64(8), 1.0);
    let t = cfg.window_samples;
    let (first, rest) = w.split_at_mut(t);
    rest[4 * t..5 * t].copy_from_slice(first);
    let s = m.temporal_encode(&m.patchify(&w).unwrap()).unwrap();
    let d = cfg.d_model;
    assert_eq!(&s.data()[..d], &s.data()[5 * d..6 * d]);

    // With no layers the summary is the attention pool of the raw patches.
    let cfg0 = ModelConfig {
        n_temporal_layers: 0,
        ..cfg.clone()
    };
    let m0 = DecoderModel::new(cfg0.clone(), 6).unwrap();
    let patches = m0.patchify(&w).unwrap();
    let s0 = m0.temporal_encode(&patches).unwrap();
    let key = &m0.params().by_name("pool.key").unwrap().value;
    let query = &m0.params().by_name("pool.query").unwrap().value;
    let l = cfg0.n_patches();
    for ch in 0..cfg0.n_channels {
        let x = &patches.data()[ch * l * d..(ch + 1) * l * d];
        let kq: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| key.data()[i * d + j] as f64 * query.data()[j] as f64).sum())
            .collect();
        let scores: Vec<f64> = (0..l)
            .map(|p| (0..d).map(|i| x[p * d + i] as f64 * kq[i]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..d {
            let want: f64 = (0..l).map(|p| e[p] / z * x[p * d + i] as f64).sum();
            let got = s0.data()[ch * d + i] as f64;
            assert!((got - want).abs() <= 1e-4 * (1.0 + want.abs()), "ch {ch} dim {i}");
        }
    }
}

#[test]
fn spatial_encoder_properties() {
    let cfg = ModelConfig::wireless();
    let d = cfg.d_model;
    let c = cfg.n_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let vecs = Tensor32::randn(&[c, d], 1.0, &mut rng);

    let cfg0 = ModelConfig {
        n_spatial_layers: 0,
        ..cfg.clone()
    };
    let mut m0 = DecoderModel::new(cfg0, 1).unwrap();
    m0.zero_channel_embedding();
    let out = m0.spatial_encode(&vecs).unwrap();
    for i in 0..d {
        let mean = (0..c).map(|ch| vecs.data()[ch * d + i] as f64).sum::<f64>() / c as f64;
        assert!((out.data()[i] as f64 - mean).abs() <= 1e-5);
    }

    // Identical channels with no channel embedding behave like one channel.
    let mut m = DecoderModel::new(cfg.clone(), 2).unwrap();
    m.zero_channel_embedding();
    let mut single = DecoderModel::new(ModelConfig { n_channels: 1, ..cfg.clone() }, 2).unwrap();
    for p in single.params_mut().iter_mut() {
        if p.name != "spatial.channel_embedding" {
            p.value = m.params().by_name(&p.name).unwrap().value.clone();
        } else {
            p.value.fill(0.0);
        }
    }
    let row = &vecs.data()[..d];
    let dup = Tensor32::from_vec(&[c, d], row.repeat(c)).unwrap();
    let a = m.spatial_encode(&dup).unwrap();
    let b = single.spatial_encode(&Tensor32::from_vec(&[1, d], row.to_vec()).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5);
    }
}

fn permute_channels(w: &[f32], perm: &[usize], t: usize) -> Vec<f32> {
    perm.iter().flat_map(|&ch| w[ch * t..(ch + 1) * t].iter().copied()).collect()
}

#[test]
fn channel_order_sensitivity() {
    let profile = DeviceProfile::wireless();
    let cfg = ModelConfig::wireless();
    let mut m = DecoderModel::new(cfg.clone(), 21).unwrap();
    let subject = SubjectModel::population_member(0, 1, &profile, &SynthParams::default()).unwrap();
    let epochs: Vec<Epoch> = generate_dataset(&subject, &ClassLabel::ALL, 3, 2.0, 4)
        .unwrap()
        .iter()
        .map(|e| prep(e, &profile))
        .collect();
    train_supervised(&mut m, &epochs, &TrainConfig { epochs: 2, ..TrainConfig::pretrain() }).unwrap();

    let t = cfg.window_samples;
    let w = &epochs[0].data;
    let perm = [3, 0, 7, 1, 11, 2, 9, 4, 10, 5, 8, 6];
    let pw = permute_channels(w, &perm, t);
    let a = m.forward_signature(w).unwrap();
    let b = m.forward_signature(&pw).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4));

    m.zero_channel_embedding();
    let a = m.forward_intent(w).unwrap();
    let b = m.forward_intent(&pw).unwrap();
    for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
        assert!((x - y).abs() <= 1e-5);
    }
}

#[test]
fn relative_bias_is_translation_invariant() {
    let table = randn(&[2, 5], 40);
    let tape = Tape::new();
    let v = tape.constant(table);
    let short = v.rel_bias(6, 2).unwrap().to_tensor();
    let long = v.rel_bias(10, 2).unwrap().to_tensor();
    let pad = 2;
    for h in 0..2 {
        for i in 0..6 {
            for j in 0..6 {
                let a = short.data()[(h * 6 + i) * 6 + j];
                let b = long.data()[(h * 10 + i + pad) * 10 + j + pad];
                assert_eq!(a, b);
            }
        }
    }
}

fn prep(e: &Epoch, profile: &DeviceProfile) -> Epoch {
    let mut st = FilterState::for_profile(profile);
    let out = preprocess(&Chunk::new(0.0, e.n_channels, e.data.clone()).unwrap(), &mut st).unwrap();
    Epoch {
        data: out.data,
        ..e.clone()
    }
}

#[test]
fn overfits_eight_trials() {
    let profile = DeviceProfile::wireless();
    let subject = SubjectModel::population_member(2, 1, &profile, &SynthParams::default()).unwrap();
    let epochs: Vec<Epoch> = generate_dataset(&subject, &ClassLabel::COMMANDS, 2, 2.0, 7)
        .unwrap()
        .iter()
        .map(|e| prep(e, &profile))
        .collect();
    assert_eq!(epochs.len(), 8);
    let mut m = DecoderModel::new(ModelConfig::wireless(), 9).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        target_train_accuracy: Some(1.0),
        ..TrainConfig::pretrain()
    };
    let r = train_supervised(&mut m, &epochs, &cfg).unwrap();
    assert_eq!(r.final_train_accuracy, Some(1.0), "after {} epochs", r.epochs_run);
    assert!(r.epochs_run <= 200);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let profile = DeviceProfile::wireless();
    let subject = SubjectModel::population_member(1, 1, &profile, &SynthParams::default()).unwrap();
    let epochs: Vec<Epoch> = generate_dataset(&subject, &ClassLabel::ALL, 1, 2.0, 1)
        .unwrap()
        .iter()
        .map(|e| prep(e, &profile))
        .collect();
    let base = DecoderModel::new(ModelConfig::wireless(), 4).unwrap();
    let mut m = base.clone();
    train_supervised(&mut m, &epochs, &TrainConfig { epochs: 2, lr: 0.0, ..TrainConfig::pretrain() }).unwrap();
    assert_eq!(m.to_checkpoint_bytes(), base.to_checkpoint_bytes());
}

#[test]
fn loss_non_increasing_on_separable_toy_set() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = cfg.n_channels * cfg.window_samples;
    let epochs: Vec<Epoch> = (0..16)
        .map(|i| {
            let label = if i % 2 == 0 { ClassLabel::HelpMe } else { ClassLabel::Tired };
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let noise = Tensor32::randn(&[n], 0.1, &mut rng);
            let data = noise.data().iter().map(|v| v + sign).collect();
            Epoch::new(cfg.n_channels, data, Some(label), None).unwrap()
        })
        .collect();
    let mut m = DecoderModel::new(cfg, 1).unwrap();
    let r = train_supervised(
        &mut m,
        &epochs,
        &TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            ..TrainConfig::pretrain()
        },
    )
    .unwrap();
    for pair in r.epoch_losses.windows(2) {
        assert!(pair[1] <= pair[0], "{:?}", r.epoch_losses);
    }
    assert!(r.epoch_losses.last().unwrap() < &r.epoch_losses[0]);
    let _ = Tensor::<f32>::zeros(&[1]);
}
