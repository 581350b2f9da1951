//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the data its
//! backward rule needs. Nodes only reference earlier nodes, so the list is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Gradients accumulate: each `backward` call adds into the per-node gradient
//! slots until [`Tape::zero_grad`] clears them.

use std::collections::HashMap;

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, MatmulGeom, PoolGeom, ResizeGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Powf {
        x: Var,
        e: T,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Bilinear {
        x: Var,
        geom: ResizeGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        geom: MatmulGeom,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll {
        x: Var,
        scale: T,
    },
    SumAxis {
        x: Var,
        axis: usize,
        scale: T,
    },
    MaxAxis {
        x: Var,
        arg: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // Keep the open interval even where the exponential saturates.
    let hi = one - T::epsilon() / T::from_f64_lossy(2.0);
    y.max(T::min_positive_value()).min(hi)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last `backward` target(s) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Binding the same id twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    /// Makes later `param(_, id)` calls return `var` instead of a fresh copy.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    // ── elementwise ───────────────────────────────────────────────────────────

    /// `a (op) b` where `b` has `a`'s shape, a single element, or `a`'s rank
    /// with singleton dimensions that are repeated.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = kernels::broadcast_index(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { op, a, b, map }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let e = T::from_f64_lossy(e);
        let value = self.value(x).map(|v| v.powf(e));
        let rg = self.rg(x);
        self.push(value, Op::Powf { x, e }, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.powf(x, 0.5)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(arg_err("leaky_relu", format!("slope {s} outside (0, 1)")));
            }
        }
        let value = match kind {
            Activation::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s);
                self.value(x).map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Act { x, kind }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid).expect("sigmoid has no preconditions")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu has no preconditions")
    }

    // ── spatial ───────────────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", self.shape(b), geom.o),
                ));
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), kernel, stride)?;
        let s = self.shape(x);
        let shape = vec![s[0], s[1], geom.oh, geom.ow];
        let value = Tensor::new(shape, kernels::avg_pool_forward(self.value(x).data(), &geom))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, geom }, rg))
    }

    /// Mean over the spatial dimensions of an NCHW tensor, keeping them as 1x1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.mean_axis(flat, 2, true)?;
        self.reshape(m, &[s[0], s[1], 1, 1])
    }

    /// Maximum over the spatial dimensions of an NCHW tensor, keeping them as 1x1.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_max_pool", format!("expected NCHW, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.max_axis(flat, 2, true)?;
        self.reshape(m, &[s[0], s[1], 1, 1])
    }

    /// Bilinear resize with aligned corners: output pixel `i` samples source
    /// coordinate `i * (in - 1) / (out - 1)`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let geom = ResizeGeom::new(self.shape(x), out_h, out_w)?;
        let s = self.shape(x);
        let shape = vec![s[0], s[1], out_h, out_w];
        let value = Tensor::new(shape, kernels::bilinear_forward(self.value(x).data(), &geom))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Bilinear { x, geom }, rg))
    }

    // ── attention primitives ──────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let data = kernels::softmax_forward(self.value(x).data(), &s, axis);
        let value = Tensor::new(s, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Matrix product over the last two dimensions. Leading dimensions must
    /// match, or `b` may be a single 2-d matrix applied to every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let geom = MatmulGeom::new(self.shape(a), self.shape(b))?;
        let data = kernels::matmul_forward(self.value(a).data(), self.value(b).data(), &geom);
        let value = Tensor::new(geom.out_shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul { a, b, geom }, rg))
    }

    // ── layout ────────────────────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
        let out_shape = kernels::concat_shape(&shapes, axis)?;
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} is not a permutation of rank {}", s.len())));
        }
        let (data, shape) = kernels::permute(self.value(x).data(), &s, perm);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let r = self.shape(x).len();
        if a >= r || b >= r {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: a.max(b),
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    // ── reductions ────────────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll { x, scale: T::one() }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let scale = T::one() / n;
        let value = Tensor::scalar(self.value(x).sum() * scale);
        let rg = self.rg(x);
        self.push(value, Op::SumAll { x, scale }, rg)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut out = shape.to_vec();
        if keepdim || shape.len() == 1 {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        out
    }

    fn sum_axis_scaled(&mut self, x: Var, axis: usize, keepdim: bool, scale: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                rank: s.len(),
            });
        }
        let data: Vec<T> = kernels::sum_axis(self.value(x).data(), &s, axis)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let value = Tensor::new(Self::reduced_shape(&s, axis, keepdim), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis { x, axis, scale }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.sum_axis_scaled(x, axis, keepdim, T::one())
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let dim = *self.shape(x).get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            rank: self.shape(x).len(),
        })?;
        self.sum_axis_scaled(x, axis, keepdim, T::one() / T::from_usize(dim).unwrap())
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "max_axis",
                axis,
                rank: s.len(),
            });
        }
        let (data, arg) = kernels::max_axis(self.value(x).data(), &s, axis);
        let value = Tensor::new(Self::reduced_shape(&s, axis, keepdim), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxAxis { x, arg }, rg))
    }

    // ── losses ────────────────────────────────────────────────────────────────

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean softmax cross-entropy of `logits` (N x K) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(arg_err("cross_entropy", format!("label {bad} out of {} classes", s[1])));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_forward(x, &s, 1);
        let k = s[1];
        let mut loss = T::zero();
        for (n, &l) in labels.iter().enumerate() {
            let row = &x[n * k..(n + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss = loss + lse - row[l];
        }
        loss = loss / T::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ──────────────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss`. Every node that requires a
    /// gradient ends up with one (zeros if `loss` does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = scratch[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut scratch);
            scratch[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let fresh = scratch.get_mut(id).and_then(Option::take);
            match (&mut node.grad, fresh) {
                (Some(acc), Some(g)) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                (slot @ None, Some(g)) => *slot = Some(g),
                (slot @ None, None) => *slot = Some(vec![T::zero(); node.value.len()]),
                (Some(_), None) => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, grad: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut scratch[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(grad) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(grad),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b, map } => {
                let b_len = self.nodes[b.0].value.len();
                let bd = val(*b);
                let b_at = |i: usize| match map {
                    None => bd[i],
                    Some(m) => bd[m[i]],
                };
                match op {
                    BinaryOp::Add => {
                        send(*a, g.to_vec());
                        send(*b, kernels::reduce_broadcast(g, map, b_len));
                    }
                    BinaryOp::Sub => {
                        send(*a, g.to_vec());
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        send(*b, kernels::reduce_broadcast(&neg, map, b_len));
                    }
                    BinaryOp::Mul => {
                        if self.rg(*a) {
                            send(*a, g.iter().enumerate().map(|(i, &v)| v * b_at(i)).collect());
                        }
                        if self.rg(*b) {
                            let ga: Vec<T> = g.iter().zip(val(*a)).map(|(&v, &x)| v * x).collect();
                            send(*b, kernels::reduce_broadcast(&ga, map, b_len));
                        }
                    }
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar { x } => send(*x, g.to_vec()),
            Op::Powf { x, e } => {
                let em1 = *e - T::one();
                send(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(&v, &xv)| v * *e * xv.powf(em1))
                        .collect(),
                );
            }
            Op::Act { x, kind } => {
                let xd = val(*x);
                let gx = match kind {
                    Activation::LeakyRelu(s) => {
                        let s = T::from_f64_lossy(*s);
                        g.iter()
                            .zip(xd)
                            .map(|(&v, &xv)| if xv > T::zero() { v } else { v * s })
                            .collect()
                    }
                    Activation::Relu => g
                        .iter()
                        .zip(xd)
                        .map(|(&v, &xv)| if xv > T::zero() { v } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&v, &y)| v * y * (T::one() - y))
                        .collect(),
                };
                send(*x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_x = self.rg(*x);
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, geom, need_x);
                if need_x {
                    send(*x, gx);
                }
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::AvgPool { x, geom } => send(*x, kernels::avg_pool_backward(g, geom)),
            Op::Bilinear { x, geom } => send(*x, kernels::bilinear_backward(g, geom)),
            Op::Softmax { x, axis } => {
                send(
                    *x,
                    kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis),
                );
            }
            Op::Matmul { a, b, geom } => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g, geom);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = xs
                    .iter()
                    .map(|v| Vec::with_capacity(self.nodes[v.0].value.len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(xs) {
                        let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                        p.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, v) in parts.into_iter().zip(xs) {
                    send(*v, p);
                }
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (gx, _) = kernels::permute(g, node.value.shape(), &inv);
                send(*x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, dim, inner) = kernels::split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::SumAll { x, scale } => {
                let n = self.nodes[x.0].value.len();
                send(*x, vec![g[0] * *scale; n]);
            }
            Op::SumAxis { x, axis, scale } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, dim, inner) = kernels::split_axis(xs, *axis);
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for k in 0..dim {
                        for i in 0..inner {
                            gx[(o * dim + k) * inner + i] = g[o * inner + i] * *scale;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::MaxAxis { x, arg } => {
                let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&src, &v) in arg.iter().zip(g) {
                    gx[src] = gx[src] + v;
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let inv_n = g[0] / T::from_usize(labels.len()).unwrap();
                let mut gx: Vec<T> = probs.iter().map(|&p| p * inv_n).collect();
                for (n, &l) in labels.iter().enumerate() {
                    gx[n * k + l] = gx[n * k + l] - inv_n;
                }
                send(*logits, gx);
            }
        }
    }
}
