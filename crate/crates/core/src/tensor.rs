//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! The tape records only the handful of operations the two classifiers and
//! the bottleneck objective need: 3×3 same-padding convolution, ReLU, 2×2
//! max pooling, global average pooling, dense layers, softmax/cross-entropy
//! and a few elementwise and reduction ops. Values live on the tape; callers
//! hold [`Var`] handles. Leaves created with `requires_grad` accumulate their
//! gradient across [`Tape::backward`] calls until [`Tape::zero_grad`] or
//! [`Tape::reset`].

use std::fmt::{Debug, Display};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the working precision, `f64` is
/// used for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same values in another precision; gradient state is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Softmax(Var),
    Select {
        input: Var,
        index: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Ln(Var),
    Sigmoid(Var),
    ClampMax(Var, T),
    Sum(Var),
    Mean(Var),
    Smooth {
        input: Var,
        kernel: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn next_tape_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: next_tape_id(),
            nodes: Vec::new(),
        }
    }

    /// Drops every recorded value. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = next_tape_id();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable is not on this tape"));
        }
        Ok(&self.nodes[v.index].value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|v| self.nodes[v.index].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("variable from another tape")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok().and_then(|t| t.grad())
    }

    // ---- forward operations -------------------------------------------------

    /// 3×3 cross-correlation, zero padding 1, stride 1.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let x = self.check(input)?;
        let k = self.check(kernels)?;
        let b = self.check(bias)?;
        let (c, h, w) = chw(x.shape())?;
        let ks = k.shape();
        if ks.len() != 4 || ks[1] != c || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::contract(format!(
                "conv2d kernels {ks:?} incompatible with input {:?}",
                x.shape()
            )));
        }
        let o = ks[0];
        if b.shape() != [o] {
            return Err(Error::contract(format!(
                "conv2d bias {:?}, expected [{o}]",
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); o * h * w];
        conv3x3_forward(x.data(), c, h, w, k.data(), b.data(), o, &mut out);
        let value = Tensor::new(vec![o, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            &[input, kernels, bias],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(input), &[input]))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in scan order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let (c, h, w) = chw(x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "maxpool2d needs even spatial dims, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xx;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    argmax.push(best);
                    out.push(xd[best]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let (c, h, w) = chw(x.shape())?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = x
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// `W·x + b` for `x: [n]`, `W: [m,n]`, `b: [m]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.check(input)?;
        let wt = self.check(weights)?;
        let b = self.check(bias)?;
        let n = x.len();
        let ws = wt.shape();
        if x.shape().len() != 1 || ws.len() != 2 || ws[1] != n || b.shape() != [ws[0]] {
            return Err(Error::contract(format!(
                "dense: input {:?}, weights {ws:?}, bias {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let m = ws[0];
        let data = (0..m)
            .map(|r| {
                let row = &wt.data()[r * n..(r + 1) * n];
                row.iter()
                    .zip(x.data())
                    .fold(b.data()[r], |a, (&wv, &xv)| a + wv * xv)
            })
            .collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            &[input, weights, bias],
        ))
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.check(logits)?;
        if z.shape().len() != 1 || z.len() < 2 {
            return Err(Error::contract(format!(
                "logits must be a vector of ≥2 classes, got {:?}",
                z.shape()
            )));
        }
        if label >= z.len() {
            return Err(Error::contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let (probs, log_sum) = softmax_parts(z.data());
        let zmax = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let loss = log_sum - (z.data()[label] - zmax);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let z = self.check(logits)?;
        if z.shape().len() != 1 {
            return Err(Error::contract("softmax expects a vector"));
        }
        let (probs, _) = softmax_parts(z.data());
        let value = Tensor::vector(probs);
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    /// Single element `input[index]` as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.check(input)?;
        if index >= x.len() {
            return Err(Error::contract(format!(
                "select index {index} out of range {}",
                x.len()
            )));
        }
        let value = Tensor::scalar(x.data()[index]);
        Ok(self.push(value, Op::Select { input, index }, &[input]))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let x = self.check(a)?;
        let y = self.check(b)?;
        if x.shape() != y.shape() {
            return Err(Error::contract(format!(
                "{name}: shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let x = self.check(a)?;
        let data = x.data().iter().map(|&v| f(v)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.unary(a, |x| x * c)?;
        Ok(self.push(v, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.unary(a, |x| x + c)?;
        Ok(self.push(v, Op::AddScalar(a, c), &[a]))
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, c)
    }

    /// Natural log; every input element must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.check(a)?.data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::contract("ln of a non-positive value"));
        }
        let v = self.unary(a, |x| x.ln())?;
        Ok(self.push(v, Op::Ln(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, sigmoid)?;
        Ok(self.push(v, Op::Sigmoid(a), &[a]))
    }

    /// `min(a, c)`; the gradient is blocked where `a >= c`.
    pub fn clamp_max(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.unary(a, |x| if x < c { x } else { c })?;
        Ok(self.push(v, Op::ClampMax(a, c), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::of(x.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Separable per-channel blur of a `[C,H,W]` tensor with a symmetric 1-D
    /// kernel (odd length). Near borders the in-bounds weights are renormalized
    /// so a constant plane stays constant.
    pub fn smooth2d(&mut self, input: Var, kernel: Vec<T>) -> Result<Var> {
        let x = self.check(input)?;
        let (c, h, w) = chw(x.shape())?;
        if kernel.len().is_multiple_of(2) {
            return Err(Error::contract("smoothing kernel must have odd length"));
        }
        let mut out = x.data().to_vec();
        smooth_forward(&mut out, c, h, w, &kernel);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::Smooth { input, kernel }, &[input]))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added into the
    /// `grad` of every reachable leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let l = self.check(loss)?;
        if l.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let wants = |v: &Var| nodes[v.index].needs_grad;
            let val = |v: &Var| &nodes[v.index].value;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                } => {
                    let x = val(input);
                    let k = val(kernels);
                    let (c, h, w) = chw(x.shape())?;
                    let o = k.shape()[0];
                    if wants(bias) {
                        let gb = slot(&mut grads, bias, o);
                        for (oc, plane) in g.chunks_exact(h * w).enumerate() {
                            gb[oc] = gb[oc] + plane.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                    if wants(kernels) {
                        let gk = slot(&mut grads, kernels, k.len());
                        conv3x3_grad_kernels(x.data(), c, h, w, &g, o, gk);
                    }
                    if wants(input) {
                        let gx = slot(&mut grads, input, x.len());
                        conv3x3_grad_input(k.data(), c, h, w, &g, o, gx);
                    }
                }
                Op::Relu(a) => {
                    let x = val(a).data();
                    let gx = slot(&mut grads, a, x.len());
                    for ((acc, &xv), &gv) in gx.iter_mut().zip(x).zip(&g) {
                        if xv > T::zero() {
                            *acc = *acc + gv;
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let n = val(input).len();
                    let gx = slot(&mut grads, input, n);
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gx[src] = gx[src] + gv;
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let x = val(a);
                    let (_, h, w) = chw(x.shape())?;
                    let inv = T::one() / T::of((h * w) as f64);
                    let gx = slot(&mut grads, a, x.len());
                    for (plane, &gv) in gx.chunks_exact_mut(h * w).zip(&g) {
                        let d = gv * inv;
                        plane.iter_mut().for_each(|p| *p = *p + d);
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = val(input).data();
                    let wt = val(weights).data();
                    let n = x.len();
                    if wants(bias) {
                        let gb = slot(&mut grads, bias, g.len());
                        gb.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                    }
                    if wants(weights) {
                        let gw = slot(&mut grads, weights, wt.len());
                        for (r, &gv) in g.iter().enumerate() {
                            for (acc, &xv) in gw[r * n..(r + 1) * n].iter_mut().zip(x) {
                                *acc = *acc + gv * xv;
                            }
                        }
                    }
                    if wants(input) {
                        let gx = slot(&mut grads, input, n);
                        for (r, &gv) in g.iter().enumerate() {
                            for (acc, &wv) in gx.iter_mut().zip(&wt[r * n..(r + 1) * n]) {
                                *acc = *acc + gv * wv;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let gz = slot(&mut grads, logits, probs.len());
                    for (j, (acc, &p)) in gz.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        *acc = *acc + g[0] * (p - target);
                    }
                }
                Op::Softmax(a) => {
                    let p = node.value.data();
                    let dot = p
                        .iter()
                        .zip(&g)
                        .fold(T::zero(), |acc, (&pv, &gv)| acc + pv * gv);
                    let gz = slot(&mut grads, a, p.len());
                    for ((acc, &pv), &gv) in gz.iter_mut().zip(p).zip(&g) {
                        *acc = *acc + pv * (gv - dot);
                    }
                }
                Op::Select { input, index } => {
                    let n = val(input).len();
                    let gx = slot(&mut grads, input, n);
                    gx[*index] = gx[*index] + g[0];
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if wants(a) {
                        let ga = slot(&mut grads, a, g.len());
                        ga.iter_mut().zip(&g).for_each(|(p, &q)| *p = *p + q);
                    }
                    if wants(b) {
                        let gb = slot(&mut grads, b, g.len());
                        gb.iter_mut().zip(&g).for_each(|(p, &q)| *p = *p + sign * q);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let bv = val(b).data();
                        let ga = slot(&mut grads, a, g.len());
                        for ((p, &q), &r) in ga.iter_mut().zip(&g).zip(bv) {
                            *p = *p + q * r;
                        }
                    }
                    if wants(b) {
                        let av = val(a).data();
                        let gb = slot(&mut grads, b, g.len());
                        for ((p, &q), &r) in gb.iter_mut().zip(&g).zip(av) {
                            *p = *p + q * r;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(p, &q)| *p = *p + q * *c);
                }
                Op::AddScalar(a, _) => {
                    let ga = slot(&mut grads, a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(p, &q)| *p = *p + q);
                }
                Op::Ln(a) => {
                    let x = val(a).data();
                    let ga = slot(&mut grads, a, g.len());
                    for ((p, &q), &xv) in ga.iter_mut().zip(&g).zip(x) {
                        *p = *p + q / xv;
                    }
                }
                Op::Sigmoid(a) => {
                    let s = node.value.data();
                    let ga = slot(&mut grads, a, g.len());
                    for ((p, &q), &sv) in ga.iter_mut().zip(&g).zip(s) {
                        *p = *p + q * sv * (T::one() - sv);
                    }
                }
                Op::ClampMax(a, c) => {
                    let x = val(a).data();
                    let ga = slot(&mut grads, a, g.len());
                    for ((p, &q), &xv) in ga.iter_mut().zip(&g).zip(x) {
                        if xv < *c {
                            *p = *p + q;
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = val(a).len();
                    let ga = slot(&mut grads, a, n);
                    ga.iter_mut().for_each(|p| *p = *p + g[0]);
                }
                Op::Mean(a) => {
                    let n = val(a).len();
                    let d = g[0] / T::of(n as f64);
                    let ga = slot(&mut grads, a, n);
                    ga.iter_mut().for_each(|p| *p = *p + d);
                }
                Op::Smooth { input, kernel } => {
                    let (c, h, w) = chw(val(input).shape())?;
                    let mut back = g.clone();
                    smooth_transpose(&mut back, c, h, w, kernel);
                    let ga = slot(&mut grads, input, back.len());
                    ga.iter_mut().zip(&back).for_each(|(p, &q)| *p = *p + q);
                }
            }
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: &Var, n: usize) -> &'a mut Vec<T> {
    grads[v.index].get_or_insert_with(|| vec![T::zero(); n])
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::contract(format!(
            "expected a [C,H,W] tensor, got {shape:?}"
        ))),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax probabilities and `ln Σ exp(z - max z)`.
fn softmax_parts<T: Scalar>(z: &[T]) -> (Vec<T>, T) {
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - zmax).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &v| a + v);
    (exps.iter().map(|&e| e / total).collect(), total.ln())
}

/// Row/column ranges `[lo, hi)` of output positions whose source `pos + d`
/// lies inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

/// Patch matrix `[C*9, H*W]`: row `(ic*9 + ky*3 + kx)` holds the input
/// shifted by `(ky-1, kx-1)` with zeros outside.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut cols = vec![T::zero(); c * 9 * plane];
    for ic in 0..c {
        let src = &x[ic * plane..(ic + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(w, dx);
                let row = &mut cols[(ic * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the input.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, gx: &mut [T]) {
    let plane = h * w;
    for ic in 0..c {
        let dst = &mut gx[ic * plane..(ic + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(w, dx);
                let row = &cols[(ic * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                    for (d, &v) in dst[s0..s0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Dot product with eight fixed interleaved partial sums (deterministic).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + pa[i] * pb[i];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in ra.iter().zip(rb) {
        tail = tail + p * q;
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: &[T],
    b: &[T],
    o: usize,
    out: &mut [T],
) {
    let plane = h * w;
    let cols = im2col(x, c, h, w);
    for oc in 0..o {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[oc]);
        for (r, &kv) in k[oc * c * 9..(oc + 1) * c * 9].iter().enumerate() {
            axpy(kv, &cols[r * plane..(r + 1) * plane], dst);
        }
    }
}

fn conv3x3_grad_kernels<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &[T],
    o: usize,
    gk: &mut [T],
) {
    let plane = h * w;
    let cols = im2col(x, c, h, w);
    for oc in 0..o {
        let go = &g[oc * plane..(oc + 1) * plane];
        for r in 0..c * 9 {
            let idx = oc * c * 9 + r;
            gk[idx] = gk[idx] + dot(go, &cols[r * plane..(r + 1) * plane]);
        }
    }
}

fn conv3x3_grad_input<T: Scalar>(
    k: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &[T],
    o: usize,
    gx: &mut [T],
) {
    let plane = h * w;
    let mut cols = vec![T::zero(); c * 9 * plane];
    for oc in 0..o {
        let go = &g[oc * plane..(oc + 1) * plane];
        for (r, &kv) in k[oc * c * 9..(oc + 1) * c * 9].iter().enumerate() {
            axpy(kv, go, &mut cols[r * plane..(r + 1) * plane]);
        }
    }
    col2im(&cols, c, h, w, gx);
}

/// One 1-D pass of the border-renormalized blur along a strided line.
fn blur_line<T: Scalar>(line: &[T], kernel: &[T], out: &mut [T], transpose: bool) {
    let n = line.len();
    let r = (kernel.len() / 2) as isize;
    let norm = |i: usize| {
        let mut s = T::zero();
        for (j, &kv) in kernel.iter().enumerate() {
            let p = i as isize + j as isize - r;
            if p >= 0 && (p as usize) < n {
                s = s + kv;
            }
        }
        s
    };
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..n {
        let z = norm(i);
        for (j, &kv) in kernel.iter().enumerate() {
            let p = i as isize + j as isize - r;
            if p < 0 || p as usize >= n {
                continue;
            }
            let p = p as usize;
            if transpose {
                out[p] = out[p] + kv / z * line[i];
            } else {
                out[i] = out[i] + kv / z * line[p];
            }
        }
    }
}

fn smooth_apply<T: Scalar>(
    data: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    transpose: bool,
) {
    let mut line = vec![T::zero(); h.max(w)];
    let mut out = vec![T::zero(); h.max(w)];
    let rows = |data: &mut [T], line: &mut Vec<T>, out: &mut Vec<T>| {
        for ch in 0..c {
            for y in 0..h {
                let row = &mut data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                line[..w].copy_from_slice(row);
                blur_line(&line[..w], kernel, &mut out[..w], transpose);
                row.copy_from_slice(&out[..w]);
            }
        }
    };
    let cols = |data: &mut [T], line: &mut Vec<T>, out: &mut Vec<T>| {
        for ch in 0..c {
            for x in 0..w {
                for y in 0..h {
                    line[y] = data[ch * h * w + y * w + x];
                }
                blur_line(&line[..h], kernel, &mut out[..h], transpose);
                for y in 0..h {
                    data[ch * h * w + y * w + x] = out[y];
                }
            }
        }
    };
    // The transpose of (cols ∘ rows) is rows^T ∘ cols^T.
    if transpose {
        cols(data, &mut line, &mut out);
        rows(data, &mut line, &mut out);
    } else {
        rows(data, &mut line, &mut out);
        cols(data, &mut line, &mut out);
    }
}

fn smooth_forward<T: Scalar>(data: &mut [T], c: usize, h: usize, w: usize, kernel: &[T]) {
    smooth_apply(data, c, h, w, kernel, false)
}

fn smooth_transpose<T: Scalar>(data: &mut [T], c: usize, h: usize, w: usize, kernel: &[T]) {
    smooth_apply(data, c, h, w, kernel, true)
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel<T: Scalar>(sigma: f64) -> Vec<T> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / total)).collect()
}
