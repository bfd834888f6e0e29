//! Adam with coupled L2 weight decay, and the step learning-rate schedule.

use std::collections::BTreeMap;

use crate::param::Module;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Optimizer state keyed by parameter name, so it can be saved and restored
/// independently of parameter identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// One bias-corrected update of every trainable parameter of `module`
    /// from its stored gradient. A missing gradient counts as zero.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, wd, eps) = (T::one(), T::of(c.weight_decay), T::of(c.eps));
        let correct1 = T::of(1.0 - c.beta1.powi(t));
        let correct2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(lr);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape().to_vec()),
                v: Tensor::zeros(p.value.shape().to_vec()),
            });
            let grad = p.grad.as_ref().map(|g| g.data());
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g[i]) + wd * *x;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Copies the tape's gradient of every trainable parameter into `Param::grad`.
pub fn store_grads<T: Real, M: Module<T> + ?Sized>(module: &mut M, tape: &Tape<T>) {
    module.visit_mut("", &mut |_, p| {
        if p.is_trainable() {
            p.grad = tape.param_grad(p);
        }
    });
}

/// `lr0 * factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lr0: f64,
    pub factor: f64,
    pub period: usize,
}

impl StepSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.lr0 * self.factor.powi((epoch / self.period.max(1)) as i32)
    }
}
