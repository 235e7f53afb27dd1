//! Reverse-mode differentiation over [`Volume`] operations.
//!
//! Every operation appends one node holding its output value and whatever
//! its adjoint needs. Node ids are assigned in execution order, so replaying
//! the nodes backwards visits each node after all of its consumers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams, NormStats};
use crate::volume::{Shape, Triple, Volume};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        p: ConvParams,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<u32>,
    },
    UpConv {
        x: TensorId,
        w: TensorId,
        stride: Triple,
    },
    InstanceNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: NormStats,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f32),
    Offset(TensorId),
    Sum(TensorId),
    Crop {
        x: TensorId,
        start: Triple,
    },
}

#[derive(Debug)]
struct Node {
    value: Volume,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<TensorId, Volume>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Volume> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: TensorId) -> Option<Volume> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Volume, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Volume) -> TensorId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Volume) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Volume {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownTensor(id.0))
        }
    }

    fn push(&mut self, value: Volume, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn conv3d(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>, p: ConvParams) -> Result<TensorId> {
        self.check(x)?;
        self.check(w)?;
        let bias: &[f32] = match b {
            Some(b) => {
                self.check(b)?;
                self.value(b).data()
            }
            None => &[],
        };
        let y = ops::conv3d(self.value(x), self.value(w), bias, &p)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(y, Op::Conv { x, w, b, p }, rg))
    }

    pub fn maxpool3d(&mut self, x: TensorId, kernel: Triple, stride: Triple) -> Result<TensorId> {
        self.check(x)?;
        let (y, argmax) = ops::maxpool3d(self.value(x), kernel, stride)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upconv3d(&mut self, x: TensorId, w: TensorId, stride: Triple) -> Result<TensorId> {
        self.check(x)?;
        self.check(w)?;
        let y = ops::upconv3d(self.value(x), self.value(w), stride)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(y, Op::UpConv { x, w, stride }, rg))
    }

    pub fn instance_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f32) -> Result<TensorId> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let (y, stats) = ops::instance_norm_with_stats(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(y, Op::InstanceNorm { x, gamma, beta, stats }, rg))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let y = ops::relu(self.value(x));
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let y = ops::sigmoid(self.value(x));
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Sigmoid(x), rg))
    }

    fn binary(&mut self, a: TensorId, b: TensorId, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, op, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: TensorId, factor: f32) -> Result<TensorId> {
        self.check(x)?;
        let y = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Scale(x, factor), rg))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.check(x)?;
        let y = self.value(x).map(|v| v + c);
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Offset(x), rg))
    }

    /// Sum of all elements as a one-element volume (accumulated in f64).
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let y = Volume::scalar(self.value(x).sum() as f32);
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Sum(x), rg))
    }

    /// Spatial sub-box copy; channels untouched.
    pub fn crop(&mut self, x: TensorId, start: Triple, size: Triple) -> Result<TensorId> {
        self.check(x)?;
        let y = self.value(x).crop(start, size)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Crop { x, start }, rg))
    }

    /// Replay adjoints from the scalar `loss` back to every leaf that requires
    /// a gradient.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        self.check(loss)?;
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        let mut pending: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let dy = Volume::from_vec(node.value.shape(), g)?;
            let mut acc = |id: TensorId, grad: Vec<f32>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut pending[id.0] {
                    Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, v)| *e += v),
                    slot => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(TensorId(i), dy);
                }
                Op::Conv { x, w, b, p } => {
                    let need_params = self.requires_grad(*w) || b.is_some_and(|b| self.requires_grad(b));
                    let grads = ops::conv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        p,
                        &dy,
                        self.requires_grad(*x),
                        need_params,
                    );
                    if let Some(gx) = grads.input {
                        acc(*x, gx);
                    }
                    if let Some(gw) = grads.weights {
                        acc(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, grads.bias) {
                        acc(*b, gb);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    acc(*x, ops::maxpool3d_backward(self.value(*x).shape(), argmax, dy.data()));
                }
                Op::UpConv { x, w, stride } => {
                    let (gx, gw) = ops::upconv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        &dy,
                        self.requires_grad(*x),
                        self.requires_grad(*w),
                    );
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, stats } => {
                    let grads = ops::instance_norm_backward(
                        self.value(*x),
                        self.value(*gamma).data(),
                        stats,
                        &dy,
                        self.requires_grad(*x),
                    );
                    if let Some(gx) = grads.input {
                        acc(*x, gx);
                    }
                    acc(*gamma, grads.gamma);
                    acc(*beta, grads.beta);
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    acc(*x, dy.data().iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect());
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, dy.data().iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect());
                }
                Op::Add(a, b) => {
                    acc(*a, dy.data().to_vec());
                    acc(*b, dy.into_data());
                }
                Op::Sub(a, b) => {
                    acc(*a, dy.data().to_vec());
                    acc(*b, dy.data().iter().map(|&g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, dy.data().iter().zip(vb).map(|(&g, &v)| g * v).collect());
                    acc(*b, dy.data().iter().zip(va).map(|(&g, &v)| g * v).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, dy.data().iter().zip(vb).map(|(&g, &v)| g / v).collect());
                    acc(
                        *b,
                        dy.data()
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&g, (&u, &v))| -g * u / (v * v))
                            .collect(),
                    );
                }
                Op::Scale(x, f) => acc(*x, dy.data().iter().map(|&g| g * f).collect()),
                Op::Offset(x) => acc(*x, dy.into_data()),
                Op::Sum(x) => {
                    let g = dy.data()[0];
                    acc(*x, vec![g; self.value(*x).len()]);
                }
                Op::Crop { x, start } => {
                    let src = self.value(*x).shape();
                    let mut gx = Volume::zeros(src);
                    gx.write_box(&dy, *start);
                    acc(*x, gx.into_data());
                }
            }
        }
        Ok(out)
    }
}

/// Shape helper for per-channel parameter vectors (gamma, beta, bias).
pub fn vector_shape(len: usize) -> Shape {
    Shape::new(1, 1, 1, 1, len)
}

/// Per-channel vector stored as a volume.
pub fn vector(values: Vec<f32>) -> Volume {
    let len = values.len();
    Volume::from_vec(vector_shape(len), values).expect("non-empty vector")
}
