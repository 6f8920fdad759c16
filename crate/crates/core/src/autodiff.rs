//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] is a Wengert list: each call appends a node holding its
//! forward value and enough saved state to form the vector-Jacobian
//! product. Node order is a topological order, so [`Tape::backward`] just
//! walks the list in reverse. Gradients from multiple consumers of a node
//! are summed. A tape is used for exactly one forward/backward pass.

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d_geom, conv2d_transpose_geom, col2im, gemm_nn, gemm_nt, gemm_tn, im2col,
    reduce_with_argmax, sigmoid_scalar, ElementwiseOp, Operand, ReduceOp, Real, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(ElementwiseOp, Var, Var),
    Scalar(ElementwiseOp, Var, T),
    Unary(ElementwiseOp, Var),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Reduce { op: ReduceOp, input: Var, axes: Vec<usize>, argmax: Vec<usize> },
    Reshape(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols { input: Var, start: usize },
    Gather(Var, Vec<usize>),
    Clamp(Var, T, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; all zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", &[0, 0], shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // -- element-wise ------------------------------------------------------

    /// Generic element-wise entry point: unary kinds ignore `rhs`, binary
    /// kinds take either another node or a scalar.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, rhs: Option<Rhs<T>>) -> Result<Var> {
        if op.is_unary() {
            let value = tensor::elementwise(op, self.value(a), None)?;
            let rg = self.any_grad(&[a]);
            return Ok(self.push(value, Op::Unary(op, a), rg));
        }
        match rhs {
            Some(Rhs::Var(b)) => {
                let value =
                    tensor::elementwise(op, self.value(a), Some(Operand::Tensor(self.value(b))))?;
                let rg = self.any_grad(&[a, b]);
                Ok(self.push(value, Op::Binary(op, a, b), rg))
            }
            Some(Rhs::Scalar(s)) => {
                let value = tensor::elementwise(op, self.value(a), Some(Operand::Scalar(s)))?;
                let rg = self.any_grad(&[a]);
                Ok(self.push(value, Op::Scalar(op, a, s), rg))
            }
            None => Err(Error::invalid(format!("{op:?} needs a right operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(Rhs::Var(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(Rhs::Var(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(Rhs::Var(b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Div, a, Some(Rhs::Var(b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(Rhs::Scalar(s)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(Rhs::Scalar(s)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Neg, a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Log, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Tanh, a, None)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, T::one())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x >= T::zero() { x } else { slope * x });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Adds a 1-D `bias` along axis 1, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let b = self.value(bias);
        if xs.len() < 2 || b.shape() != [xs[1]] {
            return Err(Error::shape("add_bias", &[xs.get(1).copied().unwrap_or(0)], b.shape()));
        }
        let (_, c, inner) = channel_layout(&xs)?;
        let bd = b.data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + bd[(i / inner) % c];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, stride, pad }, rg))
    }

    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = tensor::conv2d_transpose(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, stride, pad }, rg))
    }

    // -- reductions and shape ------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, input: Var, axes: &[usize]) -> Result<Var> {
        let (value, argmax) = reduce_with_argmax(op, self.value(input), axes)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reduce { op, input, axes: axes.to_vec(), argmax }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(input).rank()).collect();
        if axes.is_empty() {
            return Ok(input);
        }
        self.reduce(ReduceOp::Sum, input, &axes)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(input).rank()).collect();
        if axes.is_empty() {
            return Ok(input);
        }
        self.reduce(ReduceOp::Mean, input, &axes)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Collapses every axis after the first: `B×…` → `B×F`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let b = shape[0];
        let f = shape[1..].iter().product();
        self.reshape(input, &[b, f])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(input).select_rows(rows)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::SelectRows(input, rows.to_vec()), rg))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        let [b, w] = t.shape()[..] else {
            return Err(Error::shape("slice_cols", &[0, 0], t.shape()));
        };
        if start >= end || end > w {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of width {w}")));
        }
        let mut data = Vec::with_capacity(b * (end - start));
        for r in 0..b {
            data.extend_from_slice(&t.data()[r * w + start..r * w + end]);
        }
        let value = Tensor::new([b, end - start], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::SliceCols { input, start }, rg))
    }

    /// Picks `input[r, cols[r]]` for every row of a 2-D node.
    pub fn gather(&mut self, input: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let [b, w] = t.shape()[..] else {
            return Err(Error::shape("gather", &[0, 0], t.shape()));
        };
        if cols.len() != b || cols.iter().any(|&c| c >= w) {
            return Err(Error::invalid(format!("gather: {} indices for {b}×{w}", cols.len())));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| t.data()[r * w + c]).collect();
        let value = Tensor::new([b], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gather(input, cols.to_vec()), rg))
    }

    // -- normalization ---------------------------------------------------------

    /// Row-wise softmax of a 2-D node, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let value = softmax_rows(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let [b, w] = t.shape()[..] else {
            return Err(Error::shape("log_softmax", &[0, 0], t.shape()));
        };
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let value = Tensor::new([b, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::LogSoftmax(input), rg))
    }

    /// Training-mode batch norm over every axis except axis 1. Returns the
    /// output and the biased batch statistics.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        let (b, c, inner) = channel_layout(x.shape())?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        if b < 2 {
            return Err(Error::invalid("batch_norm in train mode needs batch size >= 2"));
        }
        let count = T::lit((b * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / inner) % c;
            mean[ch] = mean[ch] + v;
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / inner) % c;
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        }
        var.iter_mut().for_each(|s| *s = *s / count);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var };
        let var = self.affine_normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((var, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = channel_layout(self.value(input).shape())?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &[c], &[mean.len()]));
        }
        let inv_std = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        self.affine_normalize(input, gamma, beta, mean, inv_std, false)
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(op, &[c], self.value(v).shape()));
            }
        }
        Ok(())
    }

    fn affine_normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (_, c, inner) = channel_layout(x.shape())?;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + bt[ch]);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", &[], lv.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.vjp(i, &g)? {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], contrib);
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if matches!(self.nodes[i].op, Op::Leaf) { g } else { None })
            .collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let broadcast = av.shape() != bv.shape();
                let (ga, gb) = match op {
                    ElementwiseOp::Add => (g.clone(), g.clone()),
                    ElementwiseOp::Sub => (g.clone(), g.map(|x| -x)),
                    ElementwiseOp::Mul => {
                        if broadcast {
                            let s = bv.data()[0];
                            (g.map(|x| x * s), g.zip_map(av, |x, a| x * a)?)
                        } else {
                            (g.zip_map(bv, |x, b| x * b)?, g.zip_map(av, |x, a| x * a)?)
                        }
                    }
                    ElementwiseOp::Div => {
                        if broadcast {
                            let s = bv.data()[0];
                            (g.map(|x| x / s), g.zip_map(av, |x, a| -x * a / (s * s))?)
                        } else {
                            let ga = g.zip_map(bv, |x, b| x / b)?;
                            let gb = Tensor::from_fn(g.shape().to_vec(), |k| {
                                let b = bv.data()[k];
                                -g.data()[k] * av.data()[k] / (b * b)
                            });
                            (ga, gb)
                        }
                    }
                    _ => unreachable!("unary op in binary node"),
                };
                if self.want(*a) {
                    out.push((*a, ga));
                }
                if self.want(*b) {
                    let gb = if broadcast {
                        Tensor::new(bv.shape().to_vec(), vec![gb.sum_all()])?
                    } else {
                        gb
                    };
                    out.push((*b, gb));
                }
            }
            Op::Scalar(op, a, s) => {
                let s = *s;
                let ga = match op {
                    ElementwiseOp::Add | ElementwiseOp::Sub => g.clone(),
                    ElementwiseOp::Mul => g.map(|x| x * s),
                    ElementwiseOp::Div => g.map(|x| x / s),
                    _ => unreachable!("unary op in scalar node"),
                };
                out.push((*a, ga));
            }
            Op::Unary(op, a) => {
                let av = self.value(*a);
                let ga = match op {
                    ElementwiseOp::Neg => g.map(|x| -x),
                    ElementwiseOp::Exp => g.zip_map(y, |x, e| x * e)?,
                    ElementwiseOp::Log => g.zip_map(av, |x, v| x / v)?,
                    ElementwiseOp::Tanh => g.zip_map(y, |x, t| x * (T::one() - t * t))?,
                    _ => unreachable!("binary op in unary node"),
                };
                out.push((*a, ga));
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v >= T::zero() { x } else { x * *slope })?;
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                out.push((*a, g.zip_map(y, |x, s| x * s * (T::one() - s))?));
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v >= *lo && v <= *hi { x } else { T::zero() })?;
                out.push((*a, ga));
            }
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.want(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                    out.push((*a, Tensor::new([m, k], ga)?));
                }
                if self.want(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, av.data(), g.data(), &mut gb);
                    out.push((*b, Tensor::new([k, n], gb)?));
                }
            }
            Op::AddBias(x, bias) => {
                if self.want(*bias) {
                    let (_, c, inner) = channel_layout(g.shape())?;
                    let mut gb = vec![T::zero(); c];
                    for (k, &v) in g.data().iter().enumerate() {
                        gb[(k / inner) % c] = gb[(k / inner) % c] + v;
                    }
                    out.push((*bias, Tensor::new([c], gb)?));
                }
                out.push((*x, g.clone()));
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let xv = self.value(*input);
                let kv = self.value(*kernel);
                let (n, f, geom) = conv2d_geom(xv, kv, *stride, *pad)?;
                let (rows, ohw) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * ohw];
                let mut gk = vec![T::zero(); f * rows];
                let mut gx = vec![T::zero(); xv.len()];
                let want_k = self.want(*kernel);
                let want_x = self.want(*input);
                for s in 0..n {
                    let go = &g.data()[s * f * ohw..(s + 1) * f * ohw];
                    if want_k {
                        im2col(&geom, &xv.data()[s * in_len..(s + 1) * in_len], &mut cols);
                        gemm_nt(f, ohw, rows, go, &cols, &mut gk);
                    }
                    if want_x {
                        cols.fill(T::zero());
                        gemm_tn(rows, f, ohw, kv.data(), go, &mut cols);
                        col2im(&geom, &cols, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if want_k {
                    out.push((*kernel, Tensor::new(kv.shape().to_vec(), gk)?));
                }
                if want_x {
                    out.push((*input, Tensor::new(xv.shape().to_vec(), gx)?));
                }
            }
            Op::ConvTranspose2d { input, kernel, stride, pad } => {
                let xv = self.value(*input);
                let kv = self.value(*kernel);
                let (n, f, geom) = conv2d_transpose_geom(xv, kv, *stride, *pad)?;
                let (rows, hw) = (geom.col_rows(), geom.col_cols());
                let out_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * hw];
                let mut gk = vec![T::zero(); f * rows];
                let mut gx = vec![T::zero(); xv.len()];
                for s in 0..n {
                    im2col(&geom, &g.data()[s * out_len..(s + 1) * out_len], &mut cols);
                    if self.want(*input) {
                        gemm_nn(f, rows, hw, kv.data(), &cols, &mut gx[s * f * hw..(s + 1) * f * hw]);
                    }
                    if self.want(*kernel) {
                        gemm_nt(f, hw, rows, &xv.data()[s * f * hw..(s + 1) * f * hw], &cols, &mut gk);
                    }
                }
                if self.want(*kernel) {
                    out.push((*kernel, Tensor::new(kv.shape().to_vec(), gk)?));
                }
                if self.want(*input) {
                    out.push((*input, Tensor::new(xv.shape().to_vec(), gx)?));
                }
            }
            Op::Reduce { op, input, axes, argmax } => {
                let xv = self.value(*input);
                if axes.is_empty() {
                    out.push((*input, g.clone()));
                } else {
                    let (_, map) = tensor::reduction_plan("reduce", xv.shape(), axes)?;
                    let gd = g.data();
                    let gx = match op {
                        ReduceOp::Sum => Tensor::from_fn(xv.shape().to_vec(), |k| gd[map[k]]),
                        ReduceOp::Mean => {
                            let count = T::lit((xv.len() / g.len()) as f64);
                            Tensor::from_fn(xv.shape().to_vec(), |k| gd[map[k]] / count)
                        }
                        ReduceOp::Max => {
                            let mut gx = Tensor::zeros(xv.shape().to_vec());
                            for (o, &src) in argmax.iter().enumerate() {
                                gx.data_mut()[src] = gx.data()[src] + gd[o];
                            }
                            gx
                        }
                    };
                    out.push((*input, gx));
                }
            }
            Op::Reshape(a) => {
                out.push((*a, g.reshape(self.value(*a).shape().to_vec())?));
            }
            Op::Softmax(a) => {
                let w = y.shape()[1];
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), xr) in g.data().chunks(w).zip(y.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::LogSoftmax(a) => {
                let w = y.shape()[1];
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), xr) in g.data().chunks(w).zip(y.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &gi), &li) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = gi - li.exp() * total;
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let (b, c, inner) = channel_layout(y.shape())?;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (k, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                    let ch = (k / inner) % c;
                    sum_g[ch] = sum_g[ch] + gv;
                    sum_gx[ch] = sum_gx[ch] + gv * h;
                }
                if self.want(*input) {
                    let count = T::lit((b * inner) as f64);
                    let gx = Tensor::from_fn(y.shape().to_vec(), |k| {
                        let ch = (k / inner) % c;
                        let gv = g.data()[k];
                        if *batch {
                            gam[ch] * inv_std[ch] * (gv - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                        } else {
                            gam[ch] * inv_std[ch] * gv
                        }
                    });
                    out.push((*input, gx));
                }
                if self.want(*gamma) {
                    out.push((*gamma, Tensor::new([c], sum_gx)?));
                }
                if self.want(*beta) {
                    out.push((*beta, Tensor::new([c], sum_g)?));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.want(*p) {
                        let gp = Tensor::new(
                            self.value(*p).shape().to_vec(),
                            g.data()[offset..offset + len].to_vec(),
                        )?;
                        out.push((*p, gp));
                    }
                    offset += len;
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let stride = av.len() / av.shape()[0];
                let mut gx = Tensor::zeros(av.shape().to_vec());
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * stride..(src + 1) * stride];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[r * stride..(r + 1) * stride]) {
                        *d = *d + v;
                    }
                }
                out.push((*a, gx));
            }
            Op::SliceCols { input, start } => {
                let av = self.value(*input);
                let w = av.shape()[1];
                let sw = g.shape()[1];
                let mut gx = Tensor::zeros(av.shape().to_vec());
                for r in 0..av.shape()[0] {
                    gx.data_mut()[r * w + start..r * w + start + sw]
                        .copy_from_slice(&g.data()[r * sw..(r + 1) * sw]);
                }
                out.push((*input, gx));
            }
            Op::Gather(a, cols) => {
                let av = self.value(*a);
                let w = av.shape()[1];
                let mut gx = Tensor::zeros(av.shape().to_vec());
                for (r, &c) in cols.iter().enumerate() {
                    gx.data_mut()[r * w + c] = g.data()[r];
                }
                out.push((*a, gx));
            }
        }
        Ok(out)
    }
}

/// Right operand for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Rhs<T> {
    Var(Var),
    Scalar(T),
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, w] = t.shape()[..] else {
        return Err(Error::shape("softmax", &[0, 0], t.shape()));
    };
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::new([b, w], out)
}
