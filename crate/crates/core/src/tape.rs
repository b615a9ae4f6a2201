//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Nodes are only
//! ever appended, so creation order is a topological order and `backward`
//! walks the tape once in reverse.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::conv::Conv3dSpec;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Scale(f64),
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>, f64),
    Max(Var, Vec<usize>),
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv3dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Trilinear(Var),
    AvgPool(Var),
    Concat(Var, Var),
    Softmax(Var),
    FocalLoss {
        logits: Var,
        labels: Vec<u16>,
        gamma: f64,
        count: usize,
    },
    SumSquares(Vec<Var>, f64),
    NormalizeAffinity(Var),
    Propagate {
        h: Var,
        kappa: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::Reshape(_) => "reshape",
            Op::Conv3d { .. } => "conv3d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Trilinear(_) => "trilinear_upsample",
            Op::AvgPool(_) => "adaptive_avg_pool",
            Op::Concat(..) => "concat_channels",
            Op::Softmax(_) => "softmax_channels",
            Op::FocalLoss { .. } => "focal_loss",
            Op::SumSquares(..) => "l2_penalty",
            Op::NormalizeAffinity(_) => "normalize_affinity",
            Op::Propagate { .. } => "propagate_step",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _, _)
            | Op::Max(a, _)
            | Op::Reshape(a)
            | Op::Trilinear(a)
            | Op::AvgPool(a)
            | Op::Softmax(a)
            | Op::NormalizeAffinity(a) => vec![*a],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::FocalLoss { logits, .. } => vec![*logits],
            Op::SumSquares(vs, _) => vs.clone(),
            Op::Propagate { h, kappa } => vec![*h, *kappa],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records forward values and replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: usize,
    warnings: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn warn(&mut self, msg: String) {
        self.warnings.push(msg);
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || crate::error::precondition("binary elementwise op needs two operands");
        match op {
            Elementwise::Add => self.add(a, b.ok_or_else(need_b)?),
            Elementwise::Sub => self.sub(a, b.ok_or_else(need_b)?),
            Elementwise::Mul => self.mul(a, b.ok_or_else(need_b)?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Scale(k) => self.scale(a, k),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_vec(ta.shape(), data);
        }
        let out = broadcast_shape(name, ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut offs_a = Vec::with_capacity(numel(&out));
        for_each_offset(&out, &sa, |_, o| offs_a.push(o));
        let mut data = Vec::with_capacity(offs_a.len());
        let (da, db) = (ta.data(), tb.data());
        for_each_offset(&out, &sb, |i, o| data.push(f(da[offs_a[i]], db[o])));
        Tensor::from_vec(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&mut self, a: Var, how: Reduction, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis {
                    op: "reduce",
                    axis: ax,
                    rank,
                });
            }
            if reduced[ax] {
                return Err(Error::DuplicateAxis(ax));
            }
            reduced[ax] = true;
        }
        let keep: Vec<usize> = (0..rank).map(|i| if reduced[i] { 1 } else { shape[i] }).collect();
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
        let st = broadcast_strides(&keep, &shape);
        let n_out = numel(&keep);
        let src = self.value(a).data();
        match how {
            Reduction::Sum | Reduction::Mean => {
                let mut acc = vec![0.0; n_out];
                for_each_offset(&shape, &st, |i, o| acc[o] += src[i]);
                if how == Reduction::Sum {
                    let t = Tensor::from_vec(&out_shape, acc)?;
                    self.push(t, Op::Sum(a, keep))
                } else {
                    let count = (numel(&shape) / n_out) as f64;
                    acc.iter_mut().for_each(|v| *v /= count);
                    let t = Tensor::from_vec(&out_shape, acc)?;
                    self.push(t, Op::Mean(a, keep, count))
                }
            }
            Reduction::Max => {
                let mut best = vec![f64::NEG_INFINITY; n_out];
                let mut arg = vec![0usize; n_out];
                for_each_offset(&shape, &st, |i, o| {
                    if src[i] > best[o] {
                        best[o] = src[i];
                        arg[o] = i;
                    }
                });
                let t = Tensor::from_vec(&out_shape, best)?;
                self.push(t, Op::Max(a, arg))
            }
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(a, Reduction::Sum, &axes)
    }

    /// Populates gradients of the scalar `loss` with respect to every leaf that
    /// requires them. The recorded graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.nodes.get(loss.0).ok_or(Error::UnknownVar)?;
        if numel(node.value.shape()) != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if loss.0 < self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = self.nodes.len();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut contrib: Vec<(Var, Tensor)> = Vec::new();
            self.node_backward(i, &g, &mut contrib);
            for (v, t) in contrib {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor, out: &mut Vec<(Var, Tensor)>) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, unbroadcast(g, val(*a).shape())));
                out.push((*b, unbroadcast(g, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, unbroadcast(g, val(*a).shape())));
                out.push((*b, unbroadcast(&g.map(|v| -v), val(*b).shape())));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let prod = broadcast_product(g, tb);
                    out.push((*a, unbroadcast(&prod, ta.shape())));
                }
                if wants(*b) {
                    let prod = broadcast_product(g, ta);
                    out.push((*b, unbroadcast(&prod, tb.shape())));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.map(|v| v * k))),
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*a, Tensor::from_vec(x.shape(), data).expect("same shape")));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                out.push((*a, Tensor::from_vec(y.shape(), data).expect("same shape")));
            }
            Op::Sum(a, keep) | Op::Mean(a, keep, _) => {
                let scale = match node.op {
                    Op::Mean(_, _, c) => 1.0 / c,
                    _ => 1.0,
                };
                let shape = val(*a).shape();
                let st = broadcast_strides(keep, shape);
                let gd = g.data();
                let mut data = vec![0.0; numel(shape)];
                for_each_offset(shape, &st, |i, o| data[i] = gd[o] * scale);
                out.push((*a, Tensor::from_vec(shape, data).expect("same shape")));
            }
            Op::Max(a, arg) => {
                let mut t = Tensor::zeros(val(*a).shape());
                let d = t.data_mut();
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                out.push((*a, t));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshaped(val(*a).shape()).expect("same numel");
                out.push((*a, t));
            }
            Op::Conv3d { x, w, b, spec } => {
                crate::ops::conv::backward(
                    spec,
                    val(*x),
                    val(*w),
                    g,
                    (*x, wants(*x)),
                    (*w, wants(*w)),
                    b.map(|bv| (bv, wants(bv))),
                    out,
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => crate::ops::batchnorm::backward(g, val(*gamma), xhat, inv_std, *train, (*x, *gamma, *beta), out),
            Op::Trilinear(x) => {
                out.push((*x, crate::ops::resample::trilinear_backward(g, val(*x).shape())));
            }
            Op::AvgPool(x) => {
                out.push((*x, crate::ops::resample::avg_pool_backward(g, val(*x).shape())));
            }
            Op::Concat(a, b) => {
                let (ga, gb) = crate::ops::channels::concat_backward(g, val(*a).shape(), val(*b).shape());
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Softmax(x) => {
                out.push((*x, crate::ops::channels::softmax_backward(g, &node.value)));
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                count,
            } => {
                let t = crate::loss::focal_backward(val(*logits), labels, *gamma, *count, g.item());
                out.push((*logits, t));
            }
            Op::SumSquares(vars, scale) => {
                for v in vars {
                    let k = 2.0 * scale * g.item();
                    out.push((*v, val(*v).map(|w| w * k)));
                }
            }
            Op::NormalizeAffinity(raw) => {
                out.push((*raw, crate::cspn::normalize_backward(val(*raw), g)));
            }
            Op::Propagate { h, kappa } => {
                let (gh, gk) = crate::cspn::propagate_backward(val(*h), val(*kappa), g);
                out.push((*h, gh));
                out.push((*kappa, gk));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Elementwise product of `g` (output shape) with `t` broadcast to it.
fn broadcast_product(g: &Tensor, t: &Tensor) -> Tensor {
    if g.shape() == t.shape() {
        let data = g.data().iter().zip(t.data()).map(|(a, b)| a * b).collect();
        return Tensor::from_vec(g.shape(), data).expect("same shape");
    }
    let st = broadcast_strides(t.shape(), g.shape());
    let td = t.data();
    let gd = g.data();
    let mut data = vec![0.0; g.len()];
    for_each_offset(g.shape(), &st, |i, o| data[i] = gd[i] * td[o]);
    Tensor::from_vec(g.shape(), data).expect("same shape")
}

/// Sums `g` down to `shape` along broadcast axes.
fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let gd = g.data();
    let mut data = vec![0.0; numel(shape)];
    for_each_offset(g.shape(), &st, |i, o| data[o] += gd[i]);
    Tensor::from_vec(shape, data).expect("broadcast target")
}
