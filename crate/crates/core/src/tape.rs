//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op executed through a [`Var`] handle together with
//! whatever the adjoint needs. [`Tape::backward`] walks the record in exact
//! reverse execution order and accumulates gradients for every node that
//! depends on a gradient-requiring leaf.
//!
//! Shapes follow two rules: elementwise binaries need identical shapes, and
//! `matmul` broadcasts only over leading batch extents (one side may be a
//! plain matrix).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::TensorError;
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose};
use crate::param::{Param, ParamId};
use crate::tensor::{Real, Tensor};

type Res<T> = Result<T, TensorError>;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, a_batched: bool, b_batched: bool, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, cin: usize, cout: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    Relu { a: usize },
    Softmax { a: usize },
    Transpose { a: usize },
    Concat { parts: Vec<usize>, widths: Vec<usize> },
    Slice { a: usize, start: usize, width: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { a: usize, mask: Vec<T> },
    GatherRows { a: usize, idx: Vec<usize> },
    MaxPool { a: usize, argmax: Vec<usize> },
    WeightedGather { a: usize, idx: Vec<usize>, weights: Vec<T>, k: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

/// Record of executed ops. One training step owns one tape.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
    checked: bool,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Per-channel statistics of one train-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner { nodes: Vec::new(), params: HashMap::new(), grads: None }),
            checked: false,
        }
    }

    /// A tape that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Self { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all recorded ops and gradients.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.params.clear();
        inner.grads = None;
    }

    /// Records a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// Records a leaf that receives a gradient.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Registers a parameter as a leaf. Repeated calls for the same parameter
    /// return the same leaf, so shared weights accumulate one gradient.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.inner.borrow().params.get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.push_leaf(p.value.clone(), p.is_trainable());
        self.inner.borrow_mut().params.insert(p.id(), v.id);
        v
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &'static str) -> Res<Var<'_, T>> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = parents.iter().any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: inner.nodes.len() - 1 })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Gradient of the last `backward` loss with respect to `v`. Every
    /// gradient-requiring leaf has one after `backward`, zero if unreached.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.inner.borrow().grads.as_ref().and_then(|g| g[v.id].clone())
    }

    pub fn param_grad(&self, p: &Param<T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let id = *inner.params.get(&p.id())?;
        inner.grads.as_ref().and_then(|g| g[id].clone())
    }

    /// Concatenates along the last dimension. All parts share leading extents.
    pub fn concat_lastdim<'t>(&'t self, parts: &[Var<'t, T>]) -> Res<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for v in &values {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(TensorError::Shape(format!(
                    "concat leading extents differ: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push(
            Tensor::from_parts(shape, data),
            Op::Concat { parts: ids.clone(), widths },
            &ids,
            "concat",
        )
    }

    /// Runs the adjoint pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Res<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.rank() != 0 {
            return Err(TensorError::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            node_adjoint(nodes, id, &g, &mut grads)?;
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        inner.grads = Some(grads);
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Like [`accumulate`], for a contribution built in a flat buffer with the
/// parent's shape.
fn accumulate_data<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, data: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    let shape = nodes[id].value.shape().to_vec();
    accumulate(grads, nodes, id, Tensor::from_parts(shape, data));
}

fn node_adjoint<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Res<()> {
    let out = &nodes[id].value;
    let gd = g.data();
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, batch, a_batched, b_batched, m, k, n } => {
            let (av, bv) = (val(a).data(), val(b).data());
            if needs(a) {
                let mut da = vec![T::zero(); val(a).numel()];
                for i in 0..batch {
                    let ao = if a_batched { i * m * k } else { 0 };
                    let bo = if b_batched { i * k * n } else { 0 };
                    gemm_nt(&gd[i * m * n..], &bv[bo..], &mut da[ao..], m, n, k);
                }
                accumulate_data(grads, nodes, a, da);
            }
            if needs(b) {
                let mut db = vec![T::zero(); val(b).numel()];
                for i in 0..batch {
                    let ao = if a_batched { i * m * k } else { 0 };
                    let bo = if b_batched { i * k * n } else { 0 };
                    gemm_tn(&av[ao..], &gd[i * m * n..], &mut db[bo..], k, m, n);
                }
                accumulate_data(grads, nodes, b, db);
            }
        }
        &Op::Linear { x, w, b, rows, cin, cout } => {
            if needs(x) {
                let mut dx = vec![T::zero(); rows * cin];
                gemm_nt(gd, val(w).data(), &mut dx, rows, cout, cin);
                accumulate_data(grads, nodes, x, dx);
            }
            if needs(w) {
                let mut dw = vec![T::zero(); cin * cout];
                gemm_tn(val(x).data(), gd, &mut dw, cin, rows, cout);
                accumulate_data(grads, nodes, w, dw);
            }
            if let Some(b) = b {
                if needs(b) {
                    let mut db = vec![T::zero(); cout];
                    for r in 0..rows {
                        for (d, &gv) in db.iter_mut().zip(&gd[r * cout..(r + 1) * cout]) {
                            *d += gv;
                        }
                    }
                    accumulate_data(grads, nodes, b, db);
                }
            }
        }
        &Op::Add { a, b } => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        &Op::Sub { a, b } => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.map(|x| -x));
        }
        &Op::Mul { a, b } => {
            if needs(a) {
                let d = gd.iter().zip(val(b).data()).map(|(&g, &y)| g * y).collect();
                accumulate_data(grads, nodes, a, d);
            }
            if needs(b) {
                let d = gd.iter().zip(val(a).data()).map(|(&g, &x)| g * x).collect();
                accumulate_data(grads, nodes, b, d);
            }
        }
        &Op::Scale { a, c } => accumulate(grads, nodes, a, g.map(|x| x * c)),
        &Op::Relu { a } => {
            let d = gd.iter().zip(out.data()).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect();
            accumulate_data(grads, nodes, a, d);
        }
        &Op::Softmax { a } => {
            let c = out.last_dim();
            let mut d = vec![T::zero(); out.numel()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let dot: T = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for j in 0..c {
                    d[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate_data(grads, nodes, a, d);
        }
        &Op::Transpose { a } => {
            let s = out.shape();
            let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
            let block = rows * cols;
            let mut d = Vec::with_capacity(out.numel());
            for chunk in gd.chunks(block) {
                d.extend(transpose(chunk, rows, cols));
            }
            accumulate_data(grads, nodes, a, d);
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = out.rows();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if needs(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    accumulate_data(grads, nodes, p, d);
                }
                offset += w;
            }
        }
        &Op::Slice { a, start, width } => {
            let full = val(a).last_dim();
            let mut d = vec![T::zero(); val(a).numel()];
            for r in 0..out.rows() {
                d[r * full + start..r * full + start + width].copy_from_slice(&gd[r * width..(r + 1) * width]);
            }
            accumulate_data(grads, nodes, a, d);
        }
        &Op::Reshape { a } => accumulate_data(grads, nodes, a, gd.to_vec()),
        &Op::Sum { a } => accumulate_data(grads, nodes, a, vec![gd[0]; val(a).numel()]),
        &Op::Mean { a } => {
            let n = val(a).numel();
            accumulate_data(grads, nodes, a, vec![gd[0] / T::of(n as f64); n]);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let c = out.last_dim();
            let rows = out.rows();
            let gam = val(*gamma).data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    let gv = gd[r * c + j];
                    sum_g[j] += gv;
                    sum_gx[j] += gv * xhat[r * c + j];
                }
            }
            if needs(*x) {
                let mut d = vec![T::zero(); rows * c];
                let nr = T::of(rows as f64);
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        d[i] = if *train {
                            gam[j] * inv_std[j] / nr * (nr * gd[i] - sum_g[j] - xhat[i] * sum_gx[j])
                        } else {
                            gd[i] * gam[j] * inv_std[j]
                        };
                    }
                }
                accumulate_data(grads, nodes, *x, d);
            }
            accumulate_data(grads, nodes, *gamma, sum_gx);
            accumulate_data(grads, nodes, *beta, sum_g);
        }
        Op::Dropout { a, mask } => {
            let d = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            accumulate_data(grads, nodes, *a, d);
        }
        Op::GatherRows { a, idx } => {
            let c = out.last_dim();
            let mut d = vec![T::zero(); val(*a).numel()];
            for (r, &src) in idx.iter().enumerate() {
                for (dst, &gv) in d[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                    *dst += gv;
                }
            }
            accumulate_data(grads, nodes, *a, d);
        }
        Op::MaxPool { a, argmax } => {
            let mut d = vec![T::zero(); val(*a).numel()];
            for (&src, &gv) in argmax.iter().zip(gd) {
                d[src] += gv;
            }
            accumulate_data(grads, nodes, *a, d);
        }
        Op::WeightedGather { a, idx, weights, k } => {
            let c = out.last_dim();
            let mut d = vec![T::zero(); val(*a).numel()];
            for q in 0..out.rows() {
                let gr = &gd[q * c..(q + 1) * c];
                for j in 0..*k {
                    let (src, w) = (idx[q * k + j], weights[q * k + j]);
                    for (dst, &gv) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                        *dst += w * gv;
                    }
                }
            }
            accumulate_data(grads, nodes, *a, d);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let classes = val(*logits).last_dim();
            let scale = gd[0] / T::of(targets.len() as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * classes + t] -= scale;
            }
            accumulate_data(grads, nodes, *logits, d);
        }
    }
    Ok(())
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Res<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &'static str) -> Res<Self> {
        self.tape.push(value, op, parents, name)
    }

    /// Matrix product over the last two extents. Leading extents must match,
    /// or one operand must be a plain matrix that is shared by every batch.
    pub fn matmul(self, rhs: Self) -> Res<Self> {
        let (av, bv) = (self.value(), rhs.value());
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(TensorError::Rank(format!("matmul needs rank >= 2, got {:?} and {:?}", av.shape(), bv.shape())));
        }
        let (ar, br) = (av.rank(), bv.rank());
        let (m, k) = (av.shape()[ar - 2], av.shape()[ar - 1]);
        let (k2, n) = (bv.shape()[br - 2], bv.shape()[br - 1]);
        if k != k2 {
            return Err(TensorError::Shape(format!("matmul inner extents: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let a_lead = &av.shape()[..ar - 2];
        let b_lead = &bv.shape()[..br - 2];
        let (a_batched, b_batched) = (!a_lead.is_empty(), !b_lead.is_empty());
        if a_batched && b_batched && a_lead != b_lead {
            return Err(TensorError::Shape(format!("matmul batch extents: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let lead = if a_batched { a_lead } else { b_lead };
        let batch: usize = lead.iter().product();
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let bo = if b_batched { i * k * n } else { 0 };
            gemm_nn(&av.data()[ao..], &bv.data()[bo..], &mut data[i * m * n..], m, k, n);
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul { a: self.id, b: rhs.id, batch, a_batched, b_batched, m, k, n },
            &[self.id, rhs.id],
            "matmul",
        )
    }

    /// `x W (+ b)` applied to every row of `x[..., cin]`, with `W[cin, cout]`.
    pub fn linear(self, weight: Self, bias: Option<Self>) -> Res<Self> {
        let (xv, wv) = (self.value(), weight.value());
        if wv.rank() != 2 {
            return Err(TensorError::Rank(format!("linear weight must be a matrix, got {:?}", wv.shape())));
        }
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != cin || xv.rank() == 0 {
            return Err(TensorError::Shape(format!("linear input {:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        let rows = xv.rows();
        let mut data = vec![T::zero(); rows * cout];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(TensorError::Shape(format!("linear bias {:?}, expected [{cout}]", bv.shape())));
            }
            for r in 0..rows {
                data[r * cout..(r + 1) * cout].copy_from_slice(bv.data());
            }
        }
        gemm_nn(xv.data(), wv.data(), &mut data, rows, cin, cout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.push(
            Tensor::from_parts(shape, data),
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, cin, cout },
            &parents,
            "linear",
        )
    }

    fn zip_with(self, rhs: Self, what: &'static str, f: impl Fn(T, T) -> T) -> Res<Tensor<T>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b, what)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(self, rhs: Self) -> Res<Self> {
        let v = self.zip_with(rhs, "add", |x, y| x + y)?;
        self.push(v, Op::Add { a: self.id, b: rhs.id }, &[self.id, rhs.id], "add")
    }

    pub fn sub(self, rhs: Self) -> Res<Self> {
        let v = self.zip_with(rhs, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub { a: self.id, b: rhs.id }, &[self.id, rhs.id], "sub")
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Self) -> Res<Self> {
        let v = self.zip_with(rhs, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul { a: self.id, b: rhs.id }, &[self.id, rhs.id], "mul")
    }

    pub fn scale(self, c: T) -> Res<Self> {
        let v = self.value().map(|x| x * c);
        self.push(v, Op::Scale { a: self.id, c }, &[self.id], "scale")
    }

    pub fn relu(self) -> Res<Self> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu { a: self.id }, &[self.id], "relu")
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(self) -> Res<Self> {
        let x = self.value();
        let c = x.last_dim();
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..start + c] {
                *e /= total;
            }
        }
        self.push(Tensor::from_parts(x.shape().to_vec(), data), Op::Softmax { a: self.id }, &[self.id], "softmax")
    }

    /// Swaps the last two extents.
    pub fn transpose_last2(self) -> Res<Self> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(TensorError::Rank(format!("transpose needs rank >= 2, got {:?}", x.shape())));
        }
        let r = x.rank();
        let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
        let mut data = Vec::with_capacity(x.numel());
        for chunk in x.data().chunks(rows * cols) {
            data.extend(transpose(chunk, rows, cols));
        }
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        self.push(Tensor::from_parts(shape, data), Op::Transpose { a: self.id }, &[self.id], "transpose")
    }

    pub fn concat_lastdim(self, rhs: Self) -> Res<Self> {
        self.tape.concat_lastdim(&[self, rhs])
    }

    /// Columns `start..start + width` of the last dimension.
    pub fn slice_lastdim(self, start: usize, width: usize) -> Res<Self> {
        let x = self.value();
        let full = x.last_dim();
        if width == 0 || start + width > full || x.rank() == 0 {
            return Err(TensorError::Shape(format!("slice {start}..{} of {:?}", start + width, x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        self.push(Tensor::from_parts(shape, data), Op::Slice { a: self.id, start, width }, &[self.id], "slice")
    }

    /// Splits the last dimension into consecutive pieces of the given widths.
    pub fn split_lastdim(self, widths: &[usize]) -> Res<Vec<Self>> {
        let total: usize = widths.iter().sum();
        if total != self.value().last_dim() {
            return Err(TensorError::Shape(format!("split widths {widths:?} vs {:?}", self.shape())));
        }
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let part = self.slice_lastdim(start, w);
                start += w;
                part
            })
            .collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Res<Self> {
        let v = self.value().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape { a: self.id }, &[self.id], "reshape")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Res<Self> {
        let s: T = self.value().data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id], "sum")
    }

    pub fn mean(self) -> Res<Self> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a: self.id }, &[self.id], "mean")
    }

    fn check_bn_params(&self, gamma: &Self, beta: &Self) -> Res<usize> {
        let c = self.value().last_dim();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::Shape(format!(
                "batch norm over {:?} with gamma {:?} and beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        Ok(c)
    }

    /// Batch norm over all rows of `x[..., C]` using the batch's own
    /// statistics. Returns the statistics so the caller can update running
    /// estimates.
    pub fn batch_norm_train(self, gamma: Self, beta: Self, eps: T) -> Res<(Self, BatchStats<T>)> {
        let c = self.check_bn_params(&gamma, &beta)?;
        let x = self.value();
        let rows = x.rows();
        if rows < 2 {
            return Err(TensorError::DegenerateBatch(rows));
        }
        let nr = T::of(rows as f64);
        let mut mean = vec![T::zero(); c];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nr);
        let mut var = vec![T::zero(); c];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nr);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.normalize(&x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, BatchStats { mean, var, count: rows }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(self, gamma: Self, beta: Self, mean: &[T], var: &[T], eps: T) -> Res<Self> {
        let c = self.check_bn_params(&gamma, &beta)?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Shape("running statistics width".into()));
        }
        let x = self.value();
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(&x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(self, x: &Tensor<T>, gamma: Self, beta: Self, mean: &[T], inv_std: Vec<T>, train: bool) -> Res<Self> {
        let c = x.last_dim();
        let (g, b) = (gamma.value(), beta.value());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat.push(h);
                data.push(g.data()[j] * h + b.data()[j]);
            }
        }
        debug_assert_eq!(data.len(), x.rows() * c);
        self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train },
            &[self.id, gamma.id, beta.id],
            "batch_norm",
        )
    }

    /// Inverted dropout: every element of every row is independently zeroed
    /// with probability `p`; survivors are scaled by `1 / (1 - p)`.
    pub fn dropout_rows(self, p: f64, rng: &mut impl Rng) -> Res<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Shape(format!("dropout probability {p} outside [0, 1)")));
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(Tensor::from_parts(x.shape().to_vec(), data), Op::Dropout { a: self.id, mask }, &[self.id], "dropout")
    }

    /// Gathers rows of the `[rows, last_dim]` view; output is `[idx.len(), last_dim]`.
    pub fn gather_rows(self, idx: &[usize]) -> Res<Self> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(TensorError::Internal(format!("gather index {bad} out of range for {} rows", x.rows())));
        }
        self.push(x.select_rows(idx), Op::GatherRows { a: self.id, idx: idx.to_vec() }, &[self.id], "gather_rows")
    }

    /// Max over the second-to-last extent: `[..., K, C] -> [..., C]`.
    /// The gradient flows to the first maximal entry.
    pub fn max_over_rows(self) -> Res<Self> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(TensorError::Rank(format!("max_over_rows needs rank >= 2, got {:?}", x.shape())));
        }
        let r = x.rank();
        let (k, c) = (x.shape()[r - 2], x.shape()[r - 1]);
        let groups = x.numel() / (k * c);
        let mut data = Vec::with_capacity(groups * c);
        let mut argmax = Vec::with_capacity(groups * c);
        for gi in 0..groups {
            let base = gi * k * c;
            for j in 0..c {
                let mut best = base + j;
                for i in 1..k {
                    let at = base + i * c + j;
                    if x.data()[at] > x.data()[best] {
                        best = at;
                    }
                }
                data.push(x.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape = x.shape()[..r - 2].to_vec();
        shape.push(c);
        self.push(Tensor::from_parts(shape, data), Op::MaxPool { a: self.id, argmax }, &[self.id], "max_over_rows")
    }

    /// `out[q] = sum_j weights[q*k + j] * x[idx[q*k + j]]`, rows of `x`
    /// taken from its `[rows, last_dim]` view. Output is `[idx.len() / k, last_dim]`.
    pub fn weighted_gather(self, idx: &[usize], weights: &[T], k: usize) -> Res<Self> {
        let x = self.value();
        if k == 0 || !idx.len().is_multiple_of(k) || idx.len() != weights.len() {
            return Err(TensorError::Shape(format!(
                "weighted gather: {} indices, {} weights, k = {k}",
                idx.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(TensorError::Internal(format!("gather index {bad} out of range for {} rows", x.rows())));
        }
        let c = x.last_dim();
        let q = idx.len() / k;
        let mut data = vec![T::zero(); q * c];
        for qi in 0..q {
            let out_row = &mut data[qi * c..(qi + 1) * c];
            for j in 0..k {
                let w = weights[qi * k + j];
                for (o, &v) in out_row.iter_mut().zip(x.row(idx[qi * k + j])) {
                    *o += w * v;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![q, c], data),
            Op::WeightedGather { a: self.id, idx: idx.to_vec(), weights: weights.to_vec(), k },
            &[self.id],
            "weighted_gather",
        )
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against class ids.
    pub fn cross_entropy(self, targets: &[usize]) -> Res<Self> {
        let x = self.value();
        let classes = x.last_dim();
        if x.rank() != 2 || x.rows() != targets.len() {
            return Err(TensorError::Shape(format!("cross entropy logits {:?} vs {} targets", x.shape(), targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Shape(format!("target {bad} outside {classes} classes")));
        }
        let mut probs = Vec::with_capacity(x.numel());
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = mx + total.ln();
            loss += log_z - row[t];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        loss /= T::of(targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
            &[self.id],
            "cross_entropy",
        )
    }
}
