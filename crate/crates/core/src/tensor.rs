//! Dense row-major tensors and the numeric kernels behind every op.
//!
//! Kernels here are plain functions over [`Tensor`] values. The
//! differentiation tape in [`crate::autodiff`] calls them for both the
//! forward pass and the vector-Jacobian products.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Real:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Dtype code used by the checkpoint format.
    const DTYPE_CODE: u8;
    /// Payload bytes per element.
    const BYTES: usize;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
}

impl ElementwiseOp {
    pub fn is_unary(self) -> bool {
        matches!(self, Self::Neg | Self::Exp | Self::Log | Self::Tanh)
    }
}

/// Right-hand operand of a binary element-wise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// N-dimensional array. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let count = shape.iter().product();
        Self {
            shape,
            data: vec![value; count],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let count: usize = shape.iter().product();
        Self {
            shape,
            data: (0..count).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &[], &self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of two equally shaped tensors, accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Rows `rows` of the leading axis, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::shape("select_rows", &[1], &[]))?;
        let stride = self.data.len() / lead;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(Error::invalid(format!("row {r} out of range {lead}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(shape, data)
    }
}

impl<T: Real> Default for Tensor<T> {
    fn default() -> Self {
        Self::scalar(T::zero())
    }
}

// ---------------------------------------------------------------------------
// element-wise

pub fn elementwise<T: Real>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    rhs: Option<Operand<'_, T>>,
) -> Result<Tensor<T>> {
    use ElementwiseOp::*;
    if op.is_unary() {
        return match op {
            Neg => Ok(a.map(|x| -x)),
            Exp => Ok(a.map(|x| x.exp())),
            Tanh => Ok(a.map(|x| x.tanh())),
            Log => {
                if let Some(bad) = a.data.iter().find(|&&x| !(x > T::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                Ok(a.map(|x| x.ln()))
            }
            _ => unreachable!(),
        };
    }
    let rhs = rhs.ok_or_else(|| Error::invalid(format!("{op:?} needs a right operand")))?;
    let f = |x: T, y: T| match op {
        Add => x + y,
        Sub => x - y,
        Mul => x * y,
        Div => x / y,
        _ => unreachable!(),
    };
    let check_div = |b: T| -> Result<()> {
        if op == Div && b == T::zero() {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        Ok(())
    };
    match rhs {
        Operand::Scalar(s) => {
            check_div(s)?;
            Ok(a.map(|x| f(x, s)))
        }
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                if b.data.len() == 1 {
                    check_div(b.data[0])?;
                    let s = b.data[0];
                    return Ok(a.map(|x| f(x, s)));
                }
                return Err(Error::shape(op_name(op), &a.shape, &b.shape));
            }
            for &y in &b.data {
                check_div(y)?;
            }
            a.zip_map(b, f)
        }
    }
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Div => "div",
        ElementwiseOp::Neg => "neg",
        ElementwiseOp::Exp => "exp",
        ElementwiseOp::Log => "log",
        ElementwiseOp::Tanh => "tanh",
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// matrix products

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + api * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        let inner = a.shape.get(1).copied().unwrap_or(0);
        let cols = b.shape.get(1).copied().unwrap_or(0);
        return Err(Error::shape("matmul", &[inner, cols], &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new([m, n], out)
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a 2-D convolution: input `C×H×W`, kernel `kh×kw`, output `OH×OW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub fn conv2d_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < k {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

pub fn conv2d_transpose_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    let full = (size - 1) * stride + k;
    if full < 2 * pad + 1 {
        return None;
    }
    Some(full - 2 * pad)
}

/// Unfolds one `C×H×W` sample into `(C·kh·kw) × (OH·OW)` columns.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &input[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, &[0, 0, 0, 0], &t.shape)),
    }
}

pub(crate) fn conv2d_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [n, c, h, w] = check_rank4("conv2d", input)?;
    let [f, kc, kh, kw] = check_rank4("conv2d", kernel)?;
    if kc != c {
        return Err(Error::shape("conv2d", &[f, c, kh, kw], kernel.shape()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let (Some(out_h), Some(out_w)) = (
        conv2d_output_size(h, kh, stride, pad),
        conv2d_output_size(w, kw, stride, pad),
    ) else {
        return Err(Error::Domain {
            op: "conv2d",
            msg: format!("kernel {kh}×{kw} larger than padded input {h}×{w} (pad {pad})"),
        });
    };
    Ok((
        n,
        f,
        ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        },
    ))
}

/// Cross-correlation of `N×C×H×W` input with `F×C×kh×kw` kernel.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, f, g) = conv2d_geom(input, kernel, stride, pad)?;
    let in_len = g.channels * g.height * g.width;
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * ohw];
    let mut out = vec![T::zero(); n * f * ohw];
    for s in 0..n {
        im2col(&g, &input.data[s * in_len..(s + 1) * in_len], &mut cols);
        gemm_nn(f, rows, ohw, &kernel.data, &cols, &mut out[s * f * ohw..(s + 1) * f * ohw]);
    }
    Tensor::new([n, f, g.out_h, g.out_w], out)
}

/// Geometry of the conv2d whose adjoint is this transposed convolution.
pub(crate) fn conv2d_transpose_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [n, f, h, w] = check_rank4("conv2d_transpose", input)?;
    let [kf, c, kh, kw] = check_rank4("conv2d_transpose", kernel)?;
    if kf != f {
        return Err(Error::shape("conv2d_transpose", &[f, c, kh, kw], kernel.shape()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d_transpose: stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        conv2d_transpose_output_size(h, kh, stride, pad),
        conv2d_transpose_output_size(w, kw, stride, pad),
    ) else {
        return Err(Error::Domain {
            op: "conv2d_transpose",
            msg: format!("degenerate output for input {h}×{w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"),
        });
    };
    let g = ConvGeom {
        channels: c,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: w,
    };
    Ok((n, f, g))
}

/// Fractionally-strided convolution: `N×F×H×W` input, `F×C×kh×kw` kernel.
pub fn conv2d_transpose<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, f, g) = conv2d_transpose_geom(input, kernel, stride, pad)?;
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); n * out_len];
    for s in 0..n {
        cols.fill(T::zero());
        gemm_tn(rows, f, hw, &kernel.data, &input.data[s * f * hw..(s + 1) * f * hw], &mut cols);
        col2im(&g, &cols, &mut out[s * out_len..(s + 1) * out_len]);
    }
    Tensor::new([n, g.channels, g.height, g.width], out)
}

// ---------------------------------------------------------------------------
// reductions

/// Output shape and, for each input element, the flat output index it reduces into.
pub(crate) fn reduction_plan(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::InvalidAxis { op, axis: ax, rank });
        }
        reduced[ax] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let count: usize = shape.iter().product();
    let mut map = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let mut o = 0;
        for d in 0..rank {
            if !reduced[d] {
                o = o * shape[d] + idx[d];
            }
        }
        map.push(o);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Reduces `a` over `axes`; reduced axes are removed. An empty axis list
/// returns the input unchanged.
pub fn reduce<T: Real>(op: ReduceOp, a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    reduce_with_argmax(op, a, axes).map(|(t, _)| t)
}

pub(crate) fn reduce_with_argmax<T: Real>(
    op: ReduceOp,
    a: &Tensor<T>,
    axes: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let name = match op {
        ReduceOp::Sum => "sum",
        ReduceOp::Mean => "mean",
        ReduceOp::Max => "max",
    };
    let (out_shape, map) = reduction_plan(name, a.shape(), axes)?;
    if axes.is_empty() {
        return Ok((a.clone(), (0..a.len()).collect()));
    }
    let out_len: usize = out_shape.iter().product();
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let mut out = vec![T::zero(); out_len];
            for (&o, &x) in map.iter().zip(&a.data) {
                out[o] = out[o] + x;
            }
            if op == ReduceOp::Mean {
                let n = T::lit((a.len() / out_len) as f64);
                out.iter_mut().for_each(|v| *v = *v / n);
            }
            Ok((Tensor::new(out_shape, out)?, Vec::new()))
        }
        ReduceOp::Max => {
            let mut out = vec![T::neg_infinity(); out_len];
            let mut arg = vec![usize::MAX; out_len];
            for (i, (&o, &x)) in map.iter().zip(&a.data).enumerate() {
                if arg[o] == usize::MAX || x > out[o] {
                    out[o] = x;
                    arg[o] = i;
                }
            }
            Ok((Tensor::new(out_shape, out)?, arg))
        }
    }
}
