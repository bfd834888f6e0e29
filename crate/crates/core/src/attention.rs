//! Point-wise and channel-wise multi-head self-attention and the dual block
//! that sums them.
//!
//! Both branches split `C` channels into `M` heads of width `d = C / M` and
//! add their concatenated head outputs to the input, so a branch whose value
//! projections are zero is exactly the identity.
//!
//! * Point-wise head: `softmax(Q K^T / sqrt(d)) V`, an `N x N` map over points.
//! * Channel-wise head: `v softmax(q^T k / sqrt(d))`, a `d x d` map over
//!   channels. `q^T k` sums over points, so the map is invariant to point
//!   order and the head output permutes with the rows of `v`.
//!
//! Softmax is always taken over the last axis (row-wise).

use rand::Rng;

use crate::error::TensorError;
use crate::param::{join, Module, Param};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

type Res<T> = Result<T, TensorError>;

/// Channel count and head count of one attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    channels: usize,
    heads: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Res<Self> {
        if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
            return Err(TensorError::Shape(format!("{channels} channels cannot be split into {heads} heads")));
        }
        Ok(Self { channels, heads })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn inv_temperature<T: Real>(&self) -> T {
        T::of(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Query, key and value projections of one head, each `[C, d]`, no bias.
#[derive(Debug, Clone)]
pub struct HeadWeights<T: Real> {
    pub query: Param<T>,
    pub key: Param<T>,
    pub value: Param<T>,
}

impl<T: Real> HeadWeights<T> {
    /// Uniform in `±sqrt(1 / C)`.
    pub fn init(config: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let shape = [config.channels, config.head_dim()];
        let bound = (1.0 / config.channels as f64).sqrt();
        Self {
            query: Param::uniform(&shape, bound, rng),
            key: Param::uniform(&shape, bound, rng),
            value: Param::uniform(&shape, bound, rng),
        }
    }

    pub fn from_tensors(query: Tensor<T>, key: Tensor<T>, value: Tensor<T>) -> Self {
        Self { query: Param::new(query), key: Param::new(key), value: Param::new(value) }
    }

    fn check(&self, config: &AttentionConfig) -> Res<()> {
        let want = [config.channels, config.head_dim()];
        for p in [&self.query, &self.key, &self.value] {
            if p.value.shape() != want {
                return Err(TensorError::Shape(format!("head weight {:?}, expected {want:?}", p.value.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for HeadWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "q"), &self.query);
        f(&join(prefix, "k"), &self.key);
        f(&join(prefix, "v"), &self.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "q"), &mut self.query);
        f(&join(prefix, "k"), &mut self.key);
        f(&join(prefix, "v"), &mut self.value);
    }
}

fn check_input<T: Real>(x: &Var<'_, T>, heads: &[HeadWeights<T>], config: &AttentionConfig) -> Res<()> {
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != config.channels {
        return Err(TensorError::Shape(format!("attention over {} channels got input {shape:?}", config.channels)));
    }
    if heads.len() != config.heads {
        return Err(TensorError::Shape(format!("{} head weight sets for {} heads", heads.len(), config.heads)));
    }
    heads.iter().try_for_each(|h| h.check(config))
}

fn project<'t, T: Real>(x: Var<'t, T>, h: &HeadWeights<T>) -> Res<[Var<'t, T>; 3]> {
    let tape = x.tape();
    Ok([
        x.matmul(tape.param(&h.query))?,
        x.matmul(tape.param(&h.key))?,
        x.matmul(tape.param(&h.value))?,
    ])
}

/// One point-wise head: returns `(S, S V)` with `S` of shape `[..., N, N]`.
fn point_head<'t, T: Real>(x: Var<'t, T>, h: &HeadWeights<T>, config: &AttentionConfig) -> Res<(Var<'t, T>, Var<'t, T>)> {
    let [q, k, v] = project(x, h)?;
    let logits = q.matmul(k.transpose_last2()?)?.scale(config.inv_temperature())?;
    let s = logits.softmax_lastdim()?;
    Ok((s, s.matmul(v)?))
}

/// One channel-wise head: returns `(U, v U)` with `U` of shape `[..., d, d]`.
fn channel_head<'t, T: Real>(x: Var<'t, T>, h: &HeadWeights<T>, config: &AttentionConfig) -> Res<(Var<'t, T>, Var<'t, T>)> {
    let [q, k, v] = project(x, h)?;
    let logits = q.transpose_last2()?.matmul(k)?.scale(config.inv_temperature())?;
    let u = logits.softmax_lastdim()?;
    Ok((u, v.matmul(u)?))
}

type HeadFn<'t, T> = fn(Var<'t, T>, &HeadWeights<T>, &AttentionConfig) -> Res<(Var<'t, T>, Var<'t, T>)>;

fn branch<'t, T: Real>(x: Var<'t, T>, heads: &[HeadWeights<T>], config: &AttentionConfig, head: HeadFn<'t, T>) -> Res<Var<'t, T>> {
    check_input(&x, heads, config)?;
    let outs = heads.iter().map(|h| head(x, h, config).map(|(_, o)| o)).collect::<Res<Vec<_>>>()?;
    let joined = if outs.len() == 1 { outs[0] } else { x.tape().concat_lastdim(&outs)? };
    joined.add(x)
}

fn maps<'t, T: Real>(x: Var<'t, T>, heads: &[HeadWeights<T>], config: &AttentionConfig, head: HeadFn<'t, T>) -> Res<Vec<Tensor<T>>> {
    check_input(&x, heads, config)?;
    heads.iter().map(|h| head(x, h, config).map(|(m, _)| (*m.value()).clone())).collect()
}

/// Point-wise multi-head self-attention with residual, `[..., N, C] -> [..., N, C]`.
pub fn point_wise_attention<'t, T: Real>(x: Var<'t, T>, heads: &[HeadWeights<T>], config: &AttentionConfig) -> Res<Var<'t, T>> {
    branch(x, heads, config, point_head)
}

/// Channel-wise multi-head self-attention with residual, `[..., N, C] -> [..., N, C]`.
pub fn channel_wise_attention<'t, T: Real>(x: Var<'t, T>, heads: &[HeadWeights<T>], config: &AttentionConfig) -> Res<Var<'t, T>> {
    branch(x, heads, config, channel_head)
}

/// The per-head point attention maps `S`, each `[..., N, N]`.
pub fn point_attention_maps<T: Real>(x: Var<'_, T>, heads: &[HeadWeights<T>], config: &AttentionConfig) -> Res<Vec<Tensor<T>>> {
    maps(x, heads, config, point_head)
}

/// The per-head channel attention maps `U`, each `[..., d, d]`.
pub fn channel_attention_maps<T: Real>(x: Var<'_, T>, heads: &[HeadWeights<T>], config: &AttentionConfig) -> Res<Vec<Tensor<T>>> {
    maps(x, heads, config, channel_head)
}

/// Which attention branches a dual block carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub point_wise: bool,
    pub channel_wise: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches { point_wise: true, channel_wise: true };
    pub const NONE: Branches = Branches { point_wise: false, channel_wise: false };
}

/// Dual point cloud transformer block: the sum of a point-wise and a
/// channel-wise attention branch over the same input. A block with one
/// branch disabled returns the other branch alone; with both disabled it is
/// the identity.
#[derive(Debug, Clone)]
pub struct DpctLayer<T: Real> {
    config: AttentionConfig,
    pub point_wise: Option<Vec<HeadWeights<T>>>,
    pub channel_wise: Option<Vec<HeadWeights<T>>>,
}

impl<T: Real> DpctLayer<T> {
    pub fn new(config: AttentionConfig, branches: Branches, rng: &mut impl Rng) -> Self {
        let mut heads = |on: bool| on.then(|| (0..config.heads).map(|_| HeadWeights::init(&config, rng)).collect());
        let point_wise = heads(branches.point_wise);
        let channel_wise = heads(branches.channel_wise);
        Self { config, point_wise, channel_wise }
    }

    pub fn from_heads(config: AttentionConfig, point_wise: Option<Vec<HeadWeights<T>>>, channel_wise: Option<Vec<HeadWeights<T>>>) -> Res<Self> {
        for heads in point_wise.iter().chain(&channel_wise) {
            if heads.len() != config.heads {
                return Err(TensorError::Shape(format!("{} head weight sets for {} heads", heads.len(), config.heads)));
            }
            heads.iter().try_for_each(|h| h.check(&config))?;
        }
        Ok(Self { config, point_wise, channel_wise })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn branches(&self) -> Branches {
        Branches { point_wise: self.point_wise.is_some(), channel_wise: self.channel_wise.is_some() }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Res<Var<'t, T>> {
        dpct_forward(x, self)
    }
}

/// Elementwise sum of the enabled branch outputs.
pub fn dpct_forward<'t, T: Real>(x: Var<'t, T>, layer: &DpctLayer<T>) -> Res<Var<'t, T>> {
    let cfg = &layer.config;
    let pw = layer.point_wise.as_deref().map(|h| point_wise_attention(x, h, cfg)).transpose()?;
    let cw = layer.channel_wise.as_deref().map(|h| channel_wise_attention(x, h, cfg)).transpose()?;
    match (pw, cw) {
        (Some(a), Some(b)) => a.add(b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => {
            let c = x.shape().last().copied().unwrap_or(0);
            if c != cfg.channels {
                return Err(TensorError::Shape(format!("dual block over {} channels got {c}", cfg.channels)));
            }
            Ok(x)
        }
    }
}

impl<T: Real> Module<T> for DpctLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, heads) in [("pw", &self.point_wise), ("cw", &self.channel_wise)] {
            for (m, h) in heads.iter().flatten().enumerate() {
                h.visit(&join(prefix, &format!("{name}{m}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, heads) in [("pw", &mut self.point_wise), ("cw", &mut self.channel_wise)] {
            for (m, h) in heads.iter_mut().flatten().enumerate() {
                h.visit_mut(&join(prefix, &format!("{name}{m}")), f);
            }
        }
    }
}
