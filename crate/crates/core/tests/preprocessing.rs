use std::f64::consts::PI;

use ispeech_core::signal::Biquad;
use ispeech_core::synth::{generate_epoch, SubjectModel, SynthParams};
use ispeech_core::{notch_filter_60hz, preprocess, Chunk, ClassLabel, DeviceProfile, FilterState};
use proptest::prelude::*;

const FS: f64 = 250.0;

fn tone(freq: f64, amplitude: f64, seconds: f64) -> Vec<f32> {
    let n = (seconds * FS) as usize;
    (0..n).map(|i| (amplitude * (2.0 * PI * freq * i as f64 / FS).sin()) as f32).collect()
}

/// Amplitude of the `freq` component by direct DFT over an integer number of cycles.
fn dft_amplitude(x: &[f32], freq: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let w = 2.0 * PI * freq * i as f64 / FS;
        re += v as f64 * w.cos();
        im -= v as f64 * w.sin();
    }
    2.0 * (re * re + im * im).sqrt() / x.len() as f64
}

fn filter_one(x: &[f32]) -> Vec<f32> {
    let mut st = FilterState::new(1, 250);
    notch_filter_60hz(&Chunk::new(0.0, 1, x.to_vec()).unwrap(), &mut st).unwrap().data
}

#[test]
fn notch_response_by_dft() {
    // 4 s tone, first second discarded, 3 s measured: every integer frequency
    // completes whole cycles.
    for (f, max_db) in [(60.0, -40.0), (1.0, 1.0), (10.0, 1.0), (30.0, 1.0), (45.0, 1.0), (80.0, 1.0)] {
        let y = filter_one(&tone(f, 1.0, 4.0));
        let gain = dft_amplitude(&y[250..], f);
        let db = 20.0 * gain.log10();
        if f == 60.0 {
            assert!(gain <= 0.01 && db <= max_db, "60 Hz gain {gain}");
        } else {
            assert!(db.abs() <= max_db, "{f} Hz gain {db:.3} dB");
        }
    }
}

#[test]
fn notch_short_tone_attenuated() {
    // The Q = 30 notch rings for about a second (pole radius 0.975), so
    // the 2 s tone is measured over its second half.
    let y = filter_one(&tone(60.0, 1.0, 2.0));
    let db = 20.0 * dft_amplitude(&y[250..], 60.0).log10();
    assert!(db <= -40.0, "{db} dB");
}

#[test]
fn analytic_magnitude_at_reference_points() {
    let b = Biquad::notch(60.0, 30.0, FS);
    assert!(b.magnitude(60.0, FS) <= 0.01);
    for f in [1.0, 10.0, 30.0, 45.0, 80.0] {
        let db = 20.0 * b.magnitude(f, FS).log10();
        assert!(db.abs() <= 1.0, "{f} Hz: {db} dB");
    }
}

#[test]
fn preprocess_scaled_tones() {
    let mut st = FilterState::new(1, 250);
    let y = preprocess(&Chunk::new(0.0, 1, tone(10.0, 1e-4, 4.0)).unwrap(), &mut st).unwrap();
    let a = dft_amplitude(&y.data[250..], 10.0);
    assert!((a - 1.0).abs() <= 0.12, "10 Hz amplitude {a}");

    let mut st = FilterState::new(1, 250);
    let y = preprocess(&Chunk::new(0.0, 1, tone(60.0, 1e-4, 4.0)).unwrap(), &mut st).unwrap();
    let tail = &y.data[250..];
    let rms = (tail.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    assert!(rms <= 1e-2, "60 Hz residual rms {rms}");
}

#[test]
fn filter_is_linear() {
    let x = tone(7.0, 1.0, 2.0);
    let z = tone(60.0, 0.5, 2.0);
    let mix: Vec<f32> = x.iter().zip(&z).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
    let (fx, fz, fm) = (filter_one(&x), filter_one(&z), filter_one(&mix));
    for i in 0..fm.len() {
        let want = 2.0 * fx[i] as f64 - 3.0 * fz[i] as f64;
        assert!((fm[i] as f64 - want).abs() <= 1e-5, "sample {i}");
    }
}

#[test]
fn generator_spectrum_has_only_template_frequencies() {
    let profile = DeviceProfile::wireless();
    let subject = SubjectModel::new("S", 4, &profile, &SynthParams::noise_free()).unwrap();
    for label in ClassLabel::ALL {
        let e = generate_epoch(&subject, label, 2.0, 9).unwrap();
        let mut expected: Vec<f64> = subject.template(label).components.iter().map(|c| c.frequency_hz).collect();
        expected.sort_by(f64::total_cmp);
        expected.dedup();
        for ch in 0..e.n_channels {
            let x = e.channel(ch);
            let spectrum: Vec<(f64, f64)> = (1..250).map(|k| k as f64 * 0.5).map(|f| (f, dft_amplitude(x, f))).collect();
            let peak = spectrum.iter().map(|s| s.1).fold(0.0, f64::max);
            let found: Vec<f64> = spectrum.iter().filter(|s| s.1 > 1e-3 * peak).map(|s| s.0).collect();
            for f in &found {
                assert!(expected.contains(f), "{label} ch {ch}: unexpected {f} Hz");
            }
            assert!(!found.is_empty());
        }
    }
}

#[test]
fn command_spectrum_dominated_by_class_components() {
    let profile = DeviceProfile::wired();
    let subject = SubjectModel::new("S", 12, &profile, &SynthParams::default()).unwrap();
    let e = generate_epoch(&subject, ClassLabel::HelpMe, 2.0, 3).unwrap();
    let t = subject.template(ClassLabel::HelpMe);
    let freqs: Vec<f64> = t.components.iter().map(|c| c.frequency_hz).collect();
    let mut template_power = 0.0;
    let mut other_max: f64 = 0.0;
    for ch in 0..e.n_channels {
        let x = e.channel(ch);
        for k in 2..120 {
            let f = k as f64 * 0.5;
            let a = dft_amplitude(x, f).powi(2);
            if freqs.contains(&f) {
                template_power += a;
            } else if f != 60.0 {
                other_max = other_max.max(a);
            }
        }
    }
    assert!(template_power / freqs.len() as f64 > 5.0 * other_max);
}

proptest! {
    #[test]
    fn chunked_equals_whole(
        seed in 0u64..1000,
        cuts in prop::collection::vec(1usize..120, 1..12),
    ) {
        let profile = DeviceProfile::wired();
        let subject = SubjectModel::new("P", seed, &profile, &SynthParams::default()).unwrap();
        let e = generate_epoch(&subject, ClassLabel::Tired, 2.0, seed).unwrap();
        let c = e.n_channels;
        let whole = preprocess(&Chunk::new(0.0, c, e.data.clone()).unwrap(), &mut FilterState::for_profile(&profile)).unwrap();

        let mut st = FilterState::for_profile(&profile);
        let mut out = vec![Vec::new(); c];
        let mut start = 0;
        let mut bounds: Vec<usize> = Vec::new();
        for cut in cuts {
            start += cut;
            if start >= e.n_samples { break; }
            bounds.push(start);
        }
        bounds.push(e.n_samples);
        let mut lo = 0;
        for hi in bounds {
            let mut data = Vec::with_capacity(c * (hi - lo));
            for ch in 0..c { data.extend_from_slice(&e.channel(ch)[lo..hi]); }
            let y = preprocess(&Chunk::new(lo as f64 / 250.0, c, data).unwrap(), &mut st).unwrap();
            for (ch, o) in out.iter_mut().enumerate() { o.extend_from_slice(y.channel(ch)); }
            lo = hi;
        }
        for ch in 0..c {
            for (a, b) in whole.channel(ch).iter().zip(&out[ch]) {
                let rel = (*a as f64 - *b as f64).abs() / (a.abs() as f64).max(1e-12);
                prop_assert!(rel <= 1e-6 || a == b);
            }
        }
    }
}
