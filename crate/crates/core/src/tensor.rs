//! Dense rank-3 / rank-2 arrays and the convolution, pooling and ReLU
//! primitives (with adjoints) used by the feature network and the style
//! statistics.
//!
//! Every routine here is a pure function of its inputs. Within each output
//! element the reduction runs in a fixed row-major order over the kernel
//! window, so results are bit-reproducible.

use crate::error::{shape_err, Error, Result};

/// Neumaier summation. Loss reductions use it so that a small change in one
/// term is not lost in the rounding of a large running total.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Channel / height / width triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Activation tensor laid out as (channel, row, col), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape3::new(channels, height, width);
        if data.len() != shape.len() {
            return shape_err(format!("tensor {shape} needs {} values, got {}", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies channel `c` out as a height x width matrix.
    pub fn plane_matrix(&self, c: usize) -> Matrix {
        Matrix { rows: self.shape.height, cols: self.shape.width, data: self.plane(c).to_vec() }
    }

    pub fn dot(&self, other: &Tensor3) -> Result<f64> {
        self.expect_shape(other.shape, "dot product")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        compensated_sum(self.data.iter().map(|v| v * v))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor3, scale: f64) -> Result<()> {
        self.expect_shape(other.shape, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite entry as (channel, row, col).
    pub fn first_non_finite(&self) -> Option<(usize, usize, usize)> {
        let i = self.data.iter().position(|v| !v.is_finite())?;
        let plane = self.shape.plane_len();
        Some((i / plane, (i % plane) / self.shape.width, i % self.shape.width))
    }

    pub(crate) fn expect_shape(&self, want: Shape3, what: &str) -> Result<()> {
        if self.shape != want {
            return shape_err(format!("{what}: expected {want}, got {}", self.shape));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Matrix rotated by 180 degrees.
    pub fn flipped(&self) -> Matrix {
        let mut data = self.data.clone();
        data.reverse();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_sq(&self) -> f64 {
        compensated_sum(self.data.iter().map(|v| v * v))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).sum()
    }
}

/// Convolution weights, `[out][in][kh][kw]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(out_channels: usize, in_channels: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        let n = out_channels * in_channels * kh * kw;
        if data.len() != n {
            return shape_err(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { out_channels, in_channels, kh, kw, data })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self { out_channels, in_channels, kh, kw, data: vec![0.0; out_channels * in_channels * kh * kw] }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, y: usize, x: usize) -> f64 {
        self.data[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }

    fn window(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kh * self.kw;
        let start = (o * self.in_channels + i) * n;
        &self.data[start..start + n]
    }
}

/// Spatial padding applied symmetrically before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding of `(k - 1) / 2` on each side.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output shape of [`conv2d`] without running it.
pub fn conv2d_output_shape(input: Shape3, kernel: &Kernel, stride: usize, padding: Padding) -> Result<Shape3> {
    if input.channels != kernel.in_channels {
        return shape_err(format!("conv input has {} channels, kernel expects {}", input.channels, kernel.in_channels));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let oh = conv_out_dim(input.height, kernel.kh, stride, padding.amount(kernel.kh));
    let ow = conv_out_dim(input.width, kernel.kw, stride, padding.amount(kernel.kw));
    match (oh, ow) {
        (Some(h), Some(w)) => Ok(Shape3::new(kernel.out_channels, h, w)),
        _ => shape_err(format!(
            "input {}x{} is smaller than the {}x{} kernel",
            input.height, input.width, kernel.kh, kernel.kw
        )),
    }
}

fn zero_pad(input: &Tensor3, ph: usize, pw: usize) -> Tensor3 {
    if ph == 0 && pw == 0 {
        return input.clone();
    }
    let s = input.shape();
    let mut out = Tensor3::zeros(Shape3::new(s.channels, s.height + 2 * ph, s.width + 2 * pw));
    for c in 0..s.channels {
        for y in 0..s.height {
            let dst = out.index(c, y + ph, pw);
            let src = input.index(c, y, 0);
            out.data[dst..dst + s.width].copy_from_slice(&input.data[src..src + s.width]);
        }
    }
    out
}

/// 2-D cross-correlation of every output filter with the input stack, plus
/// bias. With `Padding::Valid` this is the plain valid convolution.
pub fn conv2d(input: &Tensor3, kernel: &Kernel, bias: &[f64], stride: usize, padding: Padding) -> Result<Tensor3> {
    let out_shape = conv2d_output_shape(input.shape(), kernel, stride, padding)?;
    if bias.len() != kernel.out_channels {
        return shape_err(format!("bias has {} entries for {} output channels", bias.len(), kernel.out_channels));
    }
    let padded = zero_pad(input, padding.amount(kernel.kh), padding.amount(kernel.kw));
    let pw = padded.width();
    let mut out = Tensor3::zeros(out_shape);
    let (kh, kw) = (kernel.kh, kernel.kw);
    let mut o = 0;
    for oc in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = 0.0;
                for ic in 0..kernel.in_channels {
                    let win = kernel.window(oc, ic);
                    let base = padded.index(ic, oy * stride, ox * stride);
                    for ky in 0..kh {
                        let row = &padded.data[base + ky * pw..base + ky * pw + kw];
                        let krow = &win[ky * kw..(ky + 1) * kw];
                        for (a, b) in row.iter().zip(krow) {
                            acc += a * b;
                        }
                    }
                }
                out.data[o] = acc + bias[oc];
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the input of [`conv2d`], given
/// the gradient with respect to its output.
pub fn conv2d_adjoint(
    upstream: &Tensor3,
    kernel: &Kernel,
    input_shape: Shape3,
    stride: usize,
    padding: Padding,
) -> Result<Tensor3> {
    let out_shape = conv2d_output_shape(input_shape, kernel, stride, padding)?;
    upstream.expect_shape(out_shape, "conv adjoint upstream gradient")?;
    let (ph, pw) = (padding.amount(kernel.kh), padding.amount(kernel.kw));
    let padded_w = input_shape.width + 2 * pw;
    let mut grad = Tensor3::zeros(Shape3::new(input_shape.channels, input_shape.height + 2 * ph, padded_w));
    let (kh, kw) = (kernel.kh, kernel.kw);
    for oc in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let g = upstream.at(oc, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for ic in 0..kernel.in_channels {
                    let win = kernel.window(oc, ic);
                    let base = grad.index(ic, oy * stride, ox * stride);
                    for ky in 0..kh {
                        let row = &mut grad.data[base + ky * padded_w..base + ky * padded_w + kw];
                        for (a, b) in row.iter_mut().zip(&win[ky * kw..(ky + 1) * kw]) {
                            *a += g * b;
                        }
                    }
                }
            }
        }
    }
    if ph == 0 && pw == 0 {
        return Ok(grad);
    }
    Ok(Tensor3::from_fn(input_shape, |c, y, x| grad.at(c, y + ph, x + pw)))
}

/// Full 2-D cross-correlation of two equally sized planes.
///
/// For X x Y inputs the result is (2X-1) x (2Y-1); entry `(u, v)` is the
/// overlap sum of `a` against `b` shifted by `(u - (X-1), v - (Y-1))`. With
/// `a == b` this is the autocorrelation, centrally symmetric with
/// `||a||^2` at the centre.
pub fn full_xcorr_auto(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.dims() != b.dims() {
        return shape_err(format!("full correlation needs equal planes, got {:?} and {:?}", a.dims(), b.dims()));
    }
    let (h, w) = a.dims();
    if h == 0 || w == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let (oh, ow) = (2 * h - 1, 2 * w - 1);
    let mut out = Matrix::zeros(oh, ow);
    for u in 0..oh {
        // rows y of `a` such that y + u - (h - 1) lies inside `b`
        let y0 = (h - 1).saturating_sub(u);
        let y1 = (2 * h - 1 - u).min(h);
        for v in 0..ow {
            let x0 = (w - 1).saturating_sub(v);
            let x1 = (2 * w - 1 - v).min(w);
            let mut acc = 0.0;
            for y in y0..y1 {
                let by = y + u + 1 - h;
                let arow = &a.data[y * w + x0..y * w + x1];
                let bstart = by * w + x0 + v + 1 - w;
                let brow = &b.data[bstart..bstart + (x1 - x0)];
                for (p, q) in arow.iter().zip(brow) {
                    acc += p * q;
                }
            }
            out.data[u * ow + v] = acc;
        }
    }
    Ok(out)
}

/// Valid cross-correlation: `out(u, v) = sum_{p,q} big(u+p, v+q) * small(p, q)`.
pub fn valid_xcorr(big: &Matrix, small: &Matrix) -> Result<Matrix> {
    let (bh, bw) = big.dims();
    let (sh, sw) = small.dims();
    if sh > bh || sw > bw {
        return shape_err(format!("valid correlation kernel {sh}x{sw} exceeds input {bh}x{bw}"));
    }
    let (oh, ow) = (bh - sh + 1, bw - sw + 1);
    let mut out = Matrix::zeros(oh, ow);
    for u in 0..oh {
        for v in 0..ow {
            let mut acc = 0.0;
            for p in 0..sh {
                let brow = &big.data[(u + p) * bw + v..(u + p) * bw + v + sw];
                let srow = &small.data[p * sw..(p + 1) * sw];
                for (a, b) in brow.iter().zip(srow) {
                    acc += a * b;
                }
            }
            out.data[u * ow + v] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Average,
}

/// What the pooling adjoint needs to route gradients back.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub mode: PoolMode,
    pub size: usize,
    pub stride: usize,
    pub input_shape: Shape3,
    /// Flat input index of the winning element for each output (max mode).
    pub argmax: Vec<usize>,
}

pub fn pool2d(input: &Tensor3, mode: PoolMode, size: usize, stride: usize) -> Result<(Tensor3, PoolRecord)> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool size and stride must be at least 1".into()));
    }
    let s = input.shape();
    let (oh, ow) = match (conv_out_dim(s.height, size, stride, 0), conv_out_dim(s.width, size, stride, 0)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return shape_err(format!(
                "input {}x{} is smaller than the {size}x{size} pooling window",
                s.height, s.width
            ))
        }
    };
    let out_shape = Shape3::new(s.channels, oh, ow);
    let mut out = Tensor3::zeros(out_shape);
    let mut argmax = Vec::with_capacity(if mode == PoolMode::Max { out_shape.len() } else { 0 });
    let inv = 1.0 / (size * size) as f64;
    let mut o = 0;
    for c in 0..s.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                match mode {
                    PoolMode::Max => {
                        let mut best = input.index(c, oy * stride, ox * stride);
                        for ky in 0..size {
                            for kx in 0..size {
                                let i = input.index(c, oy * stride + ky, ox * stride + kx);
                                if input.data[i] > input.data[best] {
                                    best = i;
                                }
                            }
                        }
                        out.data[o] = input.data[best];
                        argmax.push(best);
                    }
                    PoolMode::Average => {
                        let mut acc = 0.0;
                        for ky in 0..size {
                            let i = input.index(c, oy * stride + ky, ox * stride);
                            acc += input.data[i..i + size].iter().sum::<f64>();
                        }
                        out.data[o] = acc * inv;
                    }
                }
                o += 1;
            }
        }
    }
    let record = PoolRecord { mode, size, stride, input_shape: s, argmax };
    Ok((out, record))
}

pub fn pool2d_adjoint(upstream: &Tensor3, record: &PoolRecord) -> Result<Tensor3> {
    let s = record.input_shape;
    let oh = (s.height - record.size) / record.stride + 1;
    let ow = (s.width - record.size) / record.stride + 1;
    upstream.expect_shape(Shape3::new(s.channels, oh, ow), "pool adjoint upstream gradient")?;
    let mut grad = Tensor3::zeros(s);
    match record.mode {
        PoolMode::Max => {
            for (g, &i) in upstream.data.iter().zip(&record.argmax) {
                grad.data[i] += g;
            }
        }
        PoolMode::Average => {
            let inv = 1.0 / (record.size * record.size) as f64;
            let mut o = 0;
            for c in 0..s.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = upstream.data[o] * inv;
                        o += 1;
                        for ky in 0..record.size {
                            let i = grad.index(c, oy * record.stride + ky, ox * record.stride);
                            grad.data[i..i + record.size].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub fn relu(input: &Tensor3) -> Tensor3 {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `upstream` through where the forward input was strictly positive.
pub fn relu_adjoint(upstream: &Tensor3, forward_input: &Tensor3) -> Result<Tensor3> {
    upstream.expect_shape(forward_input.shape(), "relu adjoint")?;
    let data = upstream.data.iter().zip(&forward_input.data).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
    Ok(Tensor3 { shape: upstream.shape, data })
}
