use ispeech_neural::gradcheck::check_gradients;
use ispeech_neural::{Tape, Tape32, Tensor, Tensor32, Tensor64, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-2;

fn rand64(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::randn(shape, 1.0, &mut rng)
}

/// Random projection so losses depend on every output coordinate differently.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = tape.constant(rand64(&y.shape(), seed ^ 0xabc));
    y.mul(w).unwrap().sum()
}

fn assert_check(name: &str, inputs: Vec<Tensor64>, f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>) {
    let report = check_gradients(&inputs, f, EPS, TOL, None);
    assert!(
        report.fraction_agreeing() >= 0.99,
        "{name}: {:.4} agreeing, worst {:.3e}",
        report.fraction_agreeing(),
        report.worst_relative_error
    );
}

#[test]
fn gradcheck_matmul() {
    assert_check("matmul", vec![rand64(&[2, 3, 4], 1), rand64(&[4, 5], 2)], |t, v| {
        project(t, v[0].matmul(v[1]).unwrap(), 3)
    });
}

#[test]
fn gradcheck_bmm() {
    assert_check("bmm", vec![rand64(&[3, 2, 4], 4), rand64(&[3, 4, 5], 5)], |t, v| {
        project(t, v[0].bmm(v[1], false).unwrap(), 6)
    });
    assert_check("bmm_t", vec![rand64(&[3, 2, 4], 7), rand64(&[3, 5, 4], 8)], |t, v| {
        project(t, v[0].bmm(v[1], true).unwrap(), 9)
    });
}

#[test]
fn gradcheck_conv1d() {
    assert_check("conv1d", vec![rand64(&[2, 3, 17], 10), rand64(&[4, 3, 5], 11)], |t, v| {
        project(t, v[0].conv1d(v[1], 3).unwrap(), 12)
    });
}

#[test]
fn gradcheck_softmax_layer_norm_activations() {
    assert_check("softmax", vec![rand64(&[3, 6], 13)], |t, v| project(t, v[0].softmax(), 14));
    assert_check(
        "layer_norm",
        vec![rand64(&[4, 8], 15), rand64(&[8], 16), rand64(&[8], 17)],
        |t, v| project(t, v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 18),
    );
    assert_check("gelu", vec![rand64(&[20], 19)], |t, v| project(t, v[0].gelu(), 20));
    assert_check("relu", vec![rand64(&[20], 21)], |t, v| project(t, v[0].relu(), 22));
    assert_check("l2_normalize", vec![rand64(&[3, 7], 23)], |t, v| {
        project(t, v[0].l2_normalize(), 24)
    });
}

#[test]
fn gradcheck_shape_ops_and_reductions() {
    assert_check("permute", vec![rand64(&[2, 3, 4], 25)], |t, v| {
        project(t, v[0].permute(&[2, 0, 1]).unwrap(), 26)
    });
    assert_check("reshape_mean", vec![rand64(&[2, 3, 4], 27)], |t, v| {
        project(t, v[0].reshape(&[6, 4]).unwrap().mean_axis(0).unwrap(), 28)
    });
    assert_check("add_suffix", vec![rand64(&[3, 2, 4], 29), rand64(&[2, 4], 30)], |t, v| {
        project(t, v[0].add_suffix(v[1]).unwrap(), 31)
    });
    assert_check("rel_bias", vec![rand64(&[2, 7], 32)], |t, v| {
        project(t, v[0].rel_bias(6, 3).unwrap(), 33)
    });
    assert_check("cross_entropy", vec![rand64(&[4, 5], 34)], |_, v| {
        v[0].cross_entropy(&[0, 4, 2, 2]).unwrap()
    });
}

/// Triple-loop reference product in f64.
fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let a = Tensor32::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor32::randn(&[5, 3], 1.0, &mut rng);
    let tape = Tape32::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    let expect = naive_matmul(a.data(), b.data(), 4, 5, 3);
    for (got, want) in c.value().data().iter().zip(expect) {
        assert!((*got as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c_in, t_in, c_out, p, stride) = (3, 40, 4, 6, 2);
    let x = Tensor32::randn(&[c_in, t_in], 1.0, &mut rng);
    let w = Tensor32::randn(&[c_out, c_in, p], 1.0, &mut rng);
    let tape = Tape32::new();
    let y = tape.constant(x.clone()).conv1d(tape.constant(w.clone()), stride).unwrap();
    let t_out = (t_in - p) / stride + 1;
    assert_eq!(y.shape(), vec![c_out, t_out]);
    for o in 0..c_out {
        for t in 0..t_out {
            let mut acc = 0.0f64;
            for i in 0..c_in {
                for k in 0..p {
                    acc += w.data()[(o * c_in + i) * p + k] as f64 * x.data()[i * t_in + t * stride + k] as f64;
                }
            }
            assert!((y.value().data()[o * t_out + t] as f64 - acc).abs() < 1e-5);
        }
    }
}

#[test]
fn cross_entropy_matches_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor32::randn(&[6, 5], 3.0, &mut rng);
    let labels = [0usize, 1, 2, 3, 4, 2];
    let tape = Tape32::new();
    let loss = tape.constant(logits.clone()).cross_entropy(&labels).unwrap();
    let mut reference = 0.0f64;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[r * 5..(r + 1) * 5].iter().map(|&v| v as f64).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        reference += lse - row[y];
    }
    reference /= labels.len() as f64;
    assert!((loss.value().data()[0] as f64 - reference).abs() < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor32::randn(&[8, 16], 1.0, &mut rng);
        let w = Tensor32::randn(&[16, 16], 0.3, &mut rng);
        let tape = Tape32::new();
        let y = tape.constant(x).matmul(tape.constant(w)).unwrap().gelu().softmax();
        y.to_tensor()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f32..50.0, 12)) {
        let tape = Tape32::new();
        let y = tape.constant(Tensor::from_vec(&[3, 4], values).unwrap()).softmax();
        for row in y.value().data().chunks(4) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardises_rows(values in prop::collection::vec(-20.0f32..20.0, 32), offset in -100.0f32..100.0) {
        let shifted: Vec<f32> = values.iter().enumerate().map(|(i, v)| v + offset + i as f32 * 0.01).collect();
        let tape = Tape32::new();
        let x = tape.constant(Tensor::from_vec(&[2, 16], shifted).unwrap());
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        for row in y.value().data().chunks(16) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3);
        }
    }
}
