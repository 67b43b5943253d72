use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out in the store's
/// parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let first: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; call [`ParamStore::zero_grad`] before the next batch.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        adam_update(store, &mut self.first, &mut self.second, &self.config, self.step);
    }
}

/// One bias-corrected Adam update at 1-based `step`.
pub fn adam_update<T: Scalar>(
    store: &mut ParamStore<T>,
    first: &mut [Vec<T>],
    second: &mut [Vec<T>],
    config: &AdamConfig,
    step: u64,
) {
    let b1 = config.beta1;
    let b2 = config.beta2;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let lr = config.lr;
    for ((p, m), v) in store.iter_mut().zip(first.iter_mut()).zip(second.iter_mut()) {
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gf = g.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::from_f64_lossy(mf);
            *vi = T::from_f64_lossy(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + config.eps);
            if update != 0.0 {
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
    }
}
