//! Learnable parameters and the visitor trait layers use to expose them.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::tensor::{Real, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique parameter identity. A tape registers each parameter once
/// per forward pass, keyed by this id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named slot of model state. Trainable parameters receive gradients and
/// optimizer updates; non-trainable ones (batch-norm running statistics) are
/// persisted in checkpoints but only change through their owning layer.
#[derive(Debug)]
pub struct Param<T: Real> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { id: ParamId::fresh(), value, grad: None, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self { id: ParamId::fresh(), value, grad: None, trainable: false }
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Self::new(Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl<T: Real> Clone for Param<T> {
    /// A clone is a distinct parameter with its own identity.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

/// Anything that owns parameters. Visit order is stable and defines the
/// parameter order used by optimizers and checkpoints.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

/// Joins a prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
