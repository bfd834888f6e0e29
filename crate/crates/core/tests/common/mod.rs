//! Shared oracles and helpers for the integration suites.
#![allow(dead_code)]

use dtnet_core::attention::HeadWeights;
use dtnet_core::layers::{BatchNorm, PointMlp, BN_EPS};
use dtnet_core::gradcheck::{relative_error, STEP};
use dtnet_core::{Module, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: dtnet_core::Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn project(f: &Tensor<f64>, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, c, d) = (f.rows(), f.last_dim(), w.last_dim());
    (0..n).map(|i| (0..d).map(|a| (0..c).map(|ch| f.get(&[i, ch]) * w.get(&[ch, a])).sum()).collect()).collect()
}

fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|x| (x - mx).exp()).sum();
    row.iter_mut().for_each(|x| *x = (*x - mx).exp() / total);
}

/// Point-wise attention for `F[N, C]`, written as explicit scalar loops.
pub fn point_wise_oracle(f: &Tensor<f64>, heads: &[HeadWeights<f64>]) -> Vec<f64> {
    let (n, c) = (f.rows(), f.last_dim());
    let d = c / heads.len();
    let mut out = f.data().to_vec();
    for (m, h) in heads.iter().enumerate() {
        let q = project(f, &h.query.value);
        let k = project(f, &h.key.value);
        let v = project(f, &h.value.value);
        for i in 0..n {
            let mut s: Vec<f64> = (0..n).map(|j| (0..d).map(|a| q[i][a] * k[j][a]).sum::<f64>() / (d as f64).sqrt()).collect();
            softmax_row(&mut s);
            for a in 0..d {
                out[i * c + m * d + a] += (0..n).map(|j| s[j] * v[j][a]).sum::<f64>();
            }
        }
    }
    out
}

/// Channel-wise attention for `F[N, C]` as scalar loops, head output `v U`.
pub fn channel_wise_oracle(f: &Tensor<f64>, heads: &[HeadWeights<f64>]) -> Vec<f64> {
    let (n, c) = (f.rows(), f.last_dim());
    let d = c / heads.len();
    let mut out = f.data().to_vec();
    for (m, h) in heads.iter().enumerate() {
        let q = project(f, &h.query.value);
        let k = project(f, &h.key.value);
        let v = project(f, &h.value.value);
        let mut u = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                u[a][b] = (0..n).map(|i| q[i][a] * k[i][b]).sum::<f64>() / (d as f64).sqrt();
            }
            softmax_row(&mut u[a]);
        }
        for i in 0..n {
            for b in 0..d {
                out[i * c + m * d + b] += (0..d).map(|a| v[i][a] * u[a][b]).sum::<f64>();
            }
        }
    }
    out
}

/// Compares every trainable parameter's tape gradient of `loss` with central
/// finite differences. Returns the worst norm-wise relative error and the
/// parameter it occurred in.
pub fn worst_param_grad_error<M, F>(module: &mut M, loss: F) -> (f64, String)
where
    M: Module<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &M) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let l = loss(&tape, module);
    tape.backward(l).unwrap();
    let mut analytic = Vec::new();
    module.visit("", &mut |name, p| {
        if p.is_trainable() {
            analytic.push((name.to_string(), tape.param_grad(p).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))));
        }
    });

    let eval = |m: &M| {
        let tape = Tape::new();
        loss(&tape, m).value().item()
    };
    let mut worst = (0.0, String::new());
    for (name, grad) in &analytic {
        let mut numeric = Vec::with_capacity(grad.numel());
        for e in 0..grad.numel() {
            let nudge = |delta: f64, m: &mut M| {
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[e] += delta;
                    }
                })
            };
            nudge(STEP, module);
            let up = eval(module);
            nudge(-2.0 * STEP, module);
            let down = eval(module);
            nudge(STEP, module);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let numeric = Tensor::new(grad.shape().to_vec(), numeric).unwrap();
        let err = relative_error(grad, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

/// Fixed random probe so losses depend on every output element differently.
pub fn probe_loss<'t>(out: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let probe = random::<f64>(&out.shape(), &mut rng(seed));
    out.mul(out.tape().constant(probe)).unwrap().sum().unwrap()
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new([n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy selection recomputing every min-distance from scratch.
pub fn fps_oracle(pts: &Tensor<f64>, s: usize, seed: usize) -> Vec<usize> {
    let n = pts.rows();
    let mut chosen = vec![seed];
    while chosen.len() < s {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let md = chosen.iter().map(|&c| d2(pts.row(i), pts.row(c))).fold(f64::INFINITY, f64::min);
            if md > best_d {
                best_d = md;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

pub fn ball_oracle(q: &Tensor<f64>, src: &Tensor<f64>, r: f64, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for qi in 0..q.rows() {
        let hits: Vec<usize> = (0..src.rows()).filter(|&j| d2(q.row(qi), src.row(j)) < r * r).take(k).collect();
        let mut row = if hits.is_empty() {
            let mut all: Vec<usize> = (0..src.rows()).collect();
            all.sort_by(|&a, &b| d2(q.row(qi), src.row(a)).partial_cmp(&d2(q.row(qi), src.row(b))).unwrap().then(a.cmp(&b)));
            vec![all[0]]
        } else {
            hits
        };
        let first = row[0];
        row.resize(k, first);
        out.extend(row);
    }
    out
}

pub fn knn_oracle(q: &Tensor<f64>, src: &Tensor<f64>, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for qi in 0..q.rows() {
        let mut all: Vec<usize> = (0..src.rows()).collect();
        all.sort_by(|&a, &b| d2(q.row(qi), src.row(a)).partial_cmp(&d2(q.row(qi), src.row(b))).unwrap().then(a.cmp(&b)));
        out.extend(&all[..k]);
    }
    out
}

/// Random affine and running statistics so eval-mode batch norm is not the identity.
pub fn randomize_bn(bn: &mut BatchNorm<f64>, rng: &mut ChaCha8Rng) {
    let c = bn.gamma.numel();
    bn.gamma.value = Tensor::new([c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    bn.beta.value = random(&[c], rng);
    bn.running_mean.value = random(&[c], rng);
    bn.running_var.value = Tensor::new([c], (0..c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
}

/// `relu(bn_eval(row W))` for a single row, as scalar loops.
pub fn mlp_oracle(mlp: &PointMlp<f64>, row: &[f64]) -> Vec<f64> {
    let w = &mlp.linear.weight.value;
    let bn = &mlp.bn;
    (0..w.last_dim())
        .map(|o| {
            let h: f64 = row.iter().enumerate().map(|(i, x)| x * w.get(&[i, o])).sum();
            let norm = (h - bn.running_mean.value.data()[o]) / (bn.running_var.value.data()[o] + BN_EPS).sqrt();
            (bn.gamma.value.data()[o] * norm + bn.beta.value.data()[o]).max(0.0)
        })
        .collect()
}

/// Classification spec over 32-point clouds, cheap enough for debug builds.
pub fn small_cls_spec() -> dtnet_core::model::NetworkSpec {
    let stages = "FDS(N=16,C=8,R=0.5,K=8)-DPCT(C=8,M=2)-GP(C=16)-DPCT(C=16,M=2)-FC(C=16)-FC(C=3)";
    dtnet_core::model::NetworkSpec {
        task: dtnet_core::model::Task::Classification,
        classes: 3,
        input_points: 32,
        stages: dtnet_core::model::parse_stages(stages).unwrap(),
        dropout: 0.2,
        branches: dtnet_core::attention::Branches::BOTH,
    }
}

/// Segmentation spec over 32-point clouds with two parts.
pub fn small_seg_spec() -> dtnet_core::model::NetworkSpec {
    let stages = "FDS(N=16,C=8,R=0.5,K=8)-DPCT(C=8,M=2)-FUS(N=32,C=8)-DPCT(C=8,M=2)-FC(C=2)";
    dtnet_core::model::NetworkSpec {
        task: dtnet_core::model::Task::Segmentation,
        classes: 2,
        input_points: 32,
        stages: dtnet_core::model::parse_stages(stages).unwrap(),
        dropout: 0.0,
        branches: dtnet_core::attention::Branches::BOTH,
    }
}

/// Training settings for the small specs: short, batch of 4.
pub fn small_config(task: dtnet_core::model::Task, epochs: usize) -> dtnet_core::train::TrainConfig {
    let mut cfg = dtnet_core::train::TrainConfig::for_task(task);
    cfg.batch_size = 4;
    cfg.epochs = epochs;
    cfg.schedule.lr0 = 0.01;
    cfg.seed = 3;
    cfg
}
