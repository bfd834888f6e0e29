//! Layers built from geometry kernels and tape ops.
//!
//! Batched point data is laid out as `[B, N, C]`. Geometry runs per
//! instance; the resulting neighbor indices are offset into the stacked
//! `[B * N, C]` row view so that one tape op covers the whole batch and batch
//! norm sees every row of the batch.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::geom::{ball_query, farthest_point_sample, group_and_reduce, interpolation_weights, knn, NeighborList};
use crate::param::{join, Module, Param, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

type Res<T> = Result<T, TensorError>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistic update: `p <- (1 - momentum) p + momentum value`.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub target: ParamId,
    pub value: Vec<T>,
    pub momentum: T,
}

/// Per-pass state threaded through every layer: the tape, train/eval mode,
/// the dropout RNG, and batch-norm statistic updates to apply afterwards.
pub struct Forward<'t, T: Real> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, T: Real> Forward<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self { tape, mode, rng: RefCell::new(rng), updates: RefCell::new(Vec::new()) }
    }

    pub fn eval(tape: &'t Tape<T>) -> Self {
        use rand::SeedableRng;
        Self::new(tape, Mode::Eval, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn take_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

/// Applies collected running-statistic updates to the module that produced them.
pub fn commit_updates<T: Real, M: Module<T> + ?Sized>(module: &mut M, updates: &[StatUpdate<T>]) {
    if updates.is_empty() {
        return;
    }
    module.visit_mut("", &mut |_, p| {
        let id = p.id();
        for u in updates.iter().filter(|u| u.target == id) {
            for (x, &v) in p.value.data_mut().iter_mut().zip(&u.value) {
                *x = (T::one() - u.momentum) * *x + u.momentum * v;
            }
        }
    });
}

/// Fully connected map `x W + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Self {
            weight: Param::uniform(&[cin, cout], bound, rng),
            bias: bias.then(|| Param::uniform(&[cout], bound, rng)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, x: Var<'t, T>) -> Res<Var<'t, T>> {
        let b = self.bias.as_ref().map(|b| fwd.tape.param(b));
        x.linear(fwd.tape.param(&self.weight), b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch norm over the last dimension with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones([channels])),
            beta: Param::new(Tensor::zeros([channels])),
            running_mean: Param::buffer(Tensor::zeros([channels])),
            running_var: Param::buffer(Tensor::ones([channels])),
        }
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, x: Var<'t, T>) -> Res<Var<'t, T>> {
        let (g, b) = (fwd.tape.param(&self.gamma), fwd.tape.param(&self.beta));
        let eps = T::of(BN_EPS);
        match fwd.mode {
            Mode::Eval => x.batch_norm_eval(g, b, self.running_mean.value.data(), self.running_var.value.data(), eps),
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(g, b, eps)?;
                let n = T::of(stats.count as f64);
                let unbiased = stats.var.iter().map(|&v| v * n / (n - T::one())).collect();
                let momentum = T::of(BN_MOMENTUM);
                let mut updates = fwd.updates.borrow_mut();
                updates.push(StatUpdate { target: self.running_mean.id(), value: stats.mean, momentum });
                updates.push(StatUpdate { target: self.running_var.id(), value: unbiased, momentum });
                Ok(y)
            }
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// `relu(bn(x W))`, shared across all rows.
#[derive(Debug, Clone)]
pub struct PointMlp<T: Real> {
    pub linear: Linear<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> PointMlp<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(cin, cout, false, rng), bn: BatchNorm::new(cout) }
    }

    pub fn out_features(&self) -> usize {
        self.linear.out_features()
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, x: Var<'t, T>) -> Res<Var<'t, T>> {
        let h = self.linear.forward(fwd, x)?;
        self.bn.forward(fwd, h)?.relu()
    }
}

impl<T: Real> Module<T> for PointMlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Splits `[B, N, D]` coordinates into per-instance `[N, D]` tensors.
fn instances<T: Real>(coords: &Tensor<T>) -> Res<Vec<Tensor<T>>> {
    if coords.rank() != 3 {
        return Err(TensorError::Rank(format!("batched coords must be [B, N, D], got {:?}", coords.shape())));
    }
    let (n, d) = (coords.shape()[1], coords.shape()[2]);
    Ok(coords.data().chunks(n * d).map(|c| Tensor::from_parts(vec![n, d], c.to_vec())).collect())
}

fn check_feats<T: Real>(feats: &Var<'_, T>, b: usize, n: usize, c: usize, what: &str) -> Res<()> {
    let s = feats.shape();
    if s != [b, n, c] {
        return Err(TensorError::Shape(format!("{what}: features {s:?}, expected {:?}", [b, n, c])));
    }
    Ok(())
}

/// Feature down-sampling: farthest point sampling picks centers, a radius
/// query gathers each center's neighborhood, and a shared mlp over
/// `[feature | neighbor - center]` rows is max-pooled per neighborhood.
#[derive(Debug, Clone)]
pub struct FdsLayer<T: Real> {
    pub out_points: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    /// First FPS center, per instance.
    pub fps_seed: usize,
    pub mlp: PointMlp<T>,
}

impl<T: Real> FdsLayer<T> {
    pub fn new(cin: usize, cout: usize, out_points: usize, radius: f64, max_neighbors: usize, rng: &mut impl Rng) -> Self {
        Self { out_points, radius, max_neighbors, fps_seed: 0, mlp: PointMlp::new(cin + 3, cout, rng) }
    }

    pub fn in_features(&self) -> usize {
        self.mlp.linear.in_features() - 3
    }

    /// `coords[B, N, 3]`, `feats[B, N, Cin]` to `coords[B, S, 3]`, `feats[B, S, Cout]`.
    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, coords: &Tensor<T>, feats: Var<'t, T>) -> Res<(Tensor<T>, Var<'t, T>)> {
        let per = instances(coords)?;
        let (b, n) = (per.len(), coords.shape()[1]);
        check_feats(&feats, b, n, self.in_features(), "down-sample layer")?;
        let s = self.out_points;
        if s > n {
            return Err(TensorError::Count(format!("cannot down-sample {n} points to {s}")));
        }
        let mut centers = Vec::with_capacity(b * s * 3);
        let mut neighbors: Option<NeighborList<T>> = None;
        for (i, pts) in per.iter().enumerate() {
            let picked = farthest_point_sample(pts, s, self.fps_seed)?;
            let c = pts.select_rows(&picked);
            let nl = ball_query(&c, pts, T::of(self.radius), self.max_neighbors)?.offset(i * n);
            match &mut neighbors {
                Some(all) => all.extend(nl),
                None => neighbors = Some(nl),
            }
            centers.extend_from_slice(c.data());
        }
        let centers = Tensor::from_parts(vec![b * s, 3], centers);
        let flat = coords.reshape([b * n, 3])?;
        let neighbors = neighbors.expect("batch has at least one instance");
        let out = group_and_reduce(&neighbors, feats, &flat, &centers, |rows| self.mlp.forward(fwd, rows))?;
        let cout = self.mlp.out_features();
        Ok((centers.reshape([b, s, 3])?, out.reshape(&[b, s, cout])?))
    }
}

impl<T: Real> Module<T> for FdsLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Degenerate down-sampling to one point: every point joins a single group
/// around the centroid, producing a global descriptor.
#[derive(Debug, Clone)]
pub struct GlobalPool<T: Real> {
    pub mlp: PointMlp<T>,
}

impl<T: Real> GlobalPool<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: PointMlp::new(cin + 3, cout, rng) }
    }

    pub fn in_features(&self) -> usize {
        self.mlp.linear.in_features() - 3
    }

    /// `coords[B, N, 3]`, `feats[B, N, Cin]` to centroid `[B, 1, 3]` and `[B, 1, Cout]`.
    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, coords: &Tensor<T>, feats: Var<'t, T>) -> Res<(Tensor<T>, Var<'t, T>)> {
        let per = instances(coords)?;
        let (b, n) = (per.len(), coords.shape()[1]);
        check_feats(&feats, b, n, self.in_features(), "global pool")?;
        let mut centroids = Vec::with_capacity(b * 3);
        let mut rel = Vec::with_capacity(b * n * 3);
        for pts in &per {
            let mut c = [T::zero(); 3];
            for r in 0..n {
                for (acc, &v) in c.iter_mut().zip(pts.row(r)) {
                    *acc += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= T::of(n as f64));
            for r in 0..n {
                rel.extend(pts.row(r).iter().zip(&c).map(|(&p, &m)| p - m));
            }
            centroids.extend(c);
        }
        let rel = fwd.tape.constant(Tensor::new([b, n, 3], rel)?);
        let rows = feats.concat_lastdim(rel)?;
        let cout = self.mlp.out_features();
        let pooled = self.mlp.forward(fwd, rows)?.max_over_rows()?;
        Ok((Tensor::new([b, 1, 3], centroids)?, pooled.reshape(&[b, 1, cout])?))
    }
}

impl<T: Real> Module<T> for GlobalPool<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Feature up-sampling: coarse features are interpolated onto the fine
/// points from their `k` nearest coarse neighbors, concatenated after the
/// skip features, and fused by a shared mlp.
#[derive(Debug, Clone)]
pub struct FusLayer<T: Real> {
    pub k: usize,
    pub skip_channels: usize,
    pub mlp: PointMlp<T>,
}

impl<T: Real> FusLayer<T> {
    pub fn new(skip_channels: usize, coarse_channels: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self { k, skip_channels, mlp: PointMlp::new(skip_channels + coarse_channels, cout, rng) }
    }

    pub fn coarse_channels(&self) -> usize {
        self.mlp.linear.in_features() - self.skip_channels
    }

    pub fn forward<'t>(
        &self,
        fwd: &Forward<'t, T>,
        fine_coords: &Tensor<T>,
        skip: Var<'t, T>,
        coarse_coords: &Tensor<T>,
        coarse: Var<'t, T>,
    ) -> Res<Var<'t, T>> {
        let fine = instances(fine_coords)?;
        let rough = instances(coarse_coords)?;
        let (b, nf, nc) = (fine.len(), fine_coords.shape()[1], coarse_coords.shape()[1]);
        if rough.len() != b {
            return Err(TensorError::Shape(format!("fine batch {b} vs coarse batch {}", rough.len())));
        }
        check_feats(&skip, b, nf, self.skip_channels, "up-sample skip")?;
        check_feats(&coarse, b, nc, self.coarse_channels(), "up-sample coarse")?;
        if nc < self.k {
            return Err(TensorError::Count(format!("{nc} coarse points cannot supply {} neighbors", self.k)));
        }
        let mut idx = Vec::with_capacity(b * nf * self.k);
        let mut weights = Vec::with_capacity(b * nf * self.k);
        for (i, (f, c)) in fine.iter().zip(&rough).enumerate() {
            let nl = knn(f, c, self.k)?;
            weights.extend(interpolation_weights(&nl));
            idx.extend(nl.indices.iter().map(|&j| j + i * nc));
        }
        let cc = self.coarse_channels();
        let up = coarse.weighted_gather(&idx, &weights, self.k)?.reshape(&[b, nf, cc])?;
        self.mlp.forward(fwd, skip.concat_lastdim(up)?)
    }
}

impl<T: Real> Module<T> for FusLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Classifier head: `linear + BN + ReLU (+ dropout in train mode)` stages
/// followed by a plain linear layer producing logits.
#[derive(Debug, Clone)]
pub struct FcHead<T: Real> {
    pub hidden: Vec<PointMlp<T>>,
    pub output: Linear<T>,
    pub dropout: f64,
}

impl<T: Real> FcHead<T> {
    /// `widths` lists every stage's output width; the last one is the class count.
    pub fn new(cin: usize, widths: &[usize], dropout: f64, rng: &mut impl Rng) -> Self {
        let (&classes, hidden_widths) = widths.split_last().expect("head needs at least one stage");
        let mut c = cin;
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        for &w in hidden_widths {
            hidden.push(PointMlp::new(c, w, rng));
            c = w;
        }
        Self { hidden, output: Linear::new(c, classes, true, rng), dropout }
    }

    pub fn classes(&self) -> usize {
        self.output.out_features()
    }

    /// `x[R, Cin]` to `logits[R, classes]`.
    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, x: Var<'t, T>) -> Res<Var<'t, T>> {
        let mut h = x;
        for stage in &self.hidden {
            h = stage.forward(fwd, h)?;
            if fwd.is_train() && self.dropout > 0.0 {
                h = h.dropout_rows(self.dropout, &mut *fwd.rng.borrow_mut())?;
            }
        }
        self.output.forward(fwd, h)
    }
}

impl<T: Real> Module<T> for FcHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.hidden.iter().enumerate() {
            s.visit(&join(prefix, &format!("fc{i}")), f);
        }
        self.output.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.hidden.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}
