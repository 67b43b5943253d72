//! Central finite-difference gradient checking.

use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub agreeing: usize,
    pub worst_relative_error: f64,
}

impl GradCheckReport {
    pub fn fraction_agreeing(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.agreeing as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.agreeing += other.agreeing;
        self.worst_relative_error = self.worst_relative_error.max(other.worst_relative_error);
    }
}

/// Relative error with a tiny floor so that two near-zero values agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `d loss / d inputs` for a scalar-valued `build`.
///
/// `coords` selects which flat coordinates of each input are perturbed
/// (`None` checks all of them).
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    build: F,
    eps: f64,
    tolerance: f64,
    coords: Option<&[Vec<usize>]>,
) -> GradCheckReport
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Var<'t, T>,
{
    let eval = |values: &[Tensor<T>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&tape, &vars);
        let v = out.value().data()[0].as_f64();
        v
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss).expect("backward");

    let mut report = GradCheckReport {
        checked: 0,
        agreeing: 0,
        worst_relative_error: 0.0,
    };
    let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let all: Vec<usize>;
        let selected: &[usize] = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..inputs[i].numel()).collect();
                &all
            }
        };
        for &c in selected {
            let orig = inputs[i].data()[c];
            perturbed[i].data_mut()[c] = T::from_f64_lossy(orig.as_f64() + eps);
            let plus = eval(&perturbed);
            perturbed[i].data_mut()[c] = T::from_f64_lossy(orig.as_f64() - eps);
            let minus = eval(&perturbed);
            perturbed[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[c].as_f64(), numeric);
            report.checked += 1;
            if err <= tolerance {
                report.agreeing += 1;
            }
            report.worst_relative_error = report.worst_relative_error.max(err);
        }
    }
    report
}
