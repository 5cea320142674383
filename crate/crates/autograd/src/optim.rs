use crate::element::{lit, Element};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    pub base_lr: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamStore<T>, base_lr: f64, config: AdamConfig) -> Self {
        Self { config, base_lr, step: 0, first: params.zero_grads(), second: params.zero_grads() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2): (T, T) = (lit(beta1), lit(beta2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - beta1), lit(1.0 - beta2));
        let step_size: T = lit(lr / c1);
        let inv_c2: T = lit(1.0 / c2);
        let eps: T = lit(eps);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            debug_assert_eq!(p.shape(), g.shape());
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
