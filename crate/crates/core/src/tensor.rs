//! Dense row-major `f64` tensors and the numeric kernels behind every
//! differentiable operation.
//!
//! Patch vectors follow one flattening convention everywhere in the crate:
//! each channel's `H×V` block is flattened row-major and the channel blocks
//! are concatenated in channel order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return shape_err(format!("shape {shape:?} must be a nonempty list of positive sizes"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return shape_err(format!(
                "dot of shapes {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise `self + s·other` for same-shape tensors.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "axpy")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a / b)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return shape_err(format!(
                "matmul of {:?} and {:?}: inner dimensions disagree",
                self.shape, other.shape
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Batched product `[b,m,k] × [b,k,n] → [b,m,n]`.
    pub fn batch_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return shape_err(format!(
                "batch_matmul of {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        let (b, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                &self.data[i * m * k..(i + 1) * m * k],
                &other.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(Tensor { shape: vec![b, m, n], data: out })
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return shape_err(format!("transpose of non-matrix shape {:?}", self.shape));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for shape {:?}", self.shape));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Broadcast to `shape`; every dimension must match or be 1.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        check_broadcastable(&self.shape, shape)?;
        let src = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_offset(shape, &src, |o| data.push(self.data[o]));
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Sum-reduce to `shape`, the adjoint of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        check_broadcastable(shape, &self.shape)?;
        let dst = broadcast_strides(shape, &self.shape);
        let mut data = vec![0.0; shape.iter().product()];
        let mut i = 0;
        for_each_offset(&self.shape, &dst, |o| {
            data[o] += self.data[i];
            i += 1;
        });
        Ok(Tensor { shape: shape.to_vec(), data })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return shape_err(format!("{what} of shapes {:?} and {:?}", a.shape, b.shape));
    }
    Ok(())
}

/// `out += a·b` with `a: m×k`, `b: k×n`, row-major, i-k-j loop order.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn check_broadcastable(small: &[usize], big: &[usize]) -> Result<()> {
    if small.len() != big.len()
        || small.iter().zip(big).any(|(&s, &b)| s != b && s != 1)
    {
        return shape_err(format!("cannot broadcast {small:?} to {big:?}"));
    }
    Ok(())
}

/// Strides of `small` laid over `big`, with 0 on broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let s = strides(small);
    small
        .iter()
        .zip(big)
        .zip(s)
        .map(|((&a, &b), st)| if a == b { st } else { 0 })
        .collect()
}

fn for_each_offset(shape: &[usize], st: &[usize], mut f: impl FnMut(usize)) {
    let nd = shape.len();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        f(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= st[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Result shape of broadcasting `a` against `b` (equal rank required).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("broadcast of {a:?} and {b:?}: ranks differ"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let nd = shape.len();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor { shape, data })
}

/// Geometry of a batched 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, rest) = match input_shape.len() {
            3 => (1, input_shape),
            4 => (input_shape[0], &input_shape[1..]),
            _ => return shape_err(format!("convolution input must be C×H×W or B×C×H×W, got {input_shape:?}")),
        };
        let g = ConvGeometry {
            batch,
            channels: rest[0],
            height: rest[1],
            width: rest[2],
            kh,
            kw,
            stride,
            pad,
        };
        if kh == 0 || kw == 0 || stride == 0 {
            return shape_err(format!("kernel {kh}×{kw} with stride {stride} is invalid"));
        }
        if g.height + 2 * pad < kh || g.width + 2 * pad < kw {
            return shape_err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{} (pad {pad}): non-positive output dimension",
                g.height, g.width
            ));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Number of sliding-window positions per image.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened patch, `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// For every `(row, column)` of the column matrix, the flat input offset
    /// it reads, or `None` where it falls in the zero padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = self.batch * oh * ow;
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for b in 0..self.batch {
                        let base = (b * self.channels + c) * self.height * self.width;
                        for y in 0..oh {
                            let iy = (y * self.stride + i) as isize - self.pad as isize;
                            for x in 0..ow {
                                let ix = (x * self.stride + j) as isize - self.pad as isize;
                                let col = (b * oh + y) * ow + x;
                                let src = if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < self.height
                                    && (ix as usize) < self.width
                                {
                                    Some(base + iy as usize * self.width + ix as usize)
                                } else {
                                    None
                                };
                                f(row * cols + col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfold sliding windows into columns: `[C·kh·kw] × [B·H_out·W_out]`.
///
/// Column `(b, p)` holds the flattened patch of image `b` at output position
/// `p` (row-major over positions); out-of-bounds taps read zero.
pub fn im2col_batch(x: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    if x.len() != g.input_shape().iter().product::<usize>() {
        return shape_err(format!("im2col input {:?} does not match geometry {g:?}", x.shape()));
    }
    let rows = g.patch_len();
    let cols = g.batch * g.positions();
    let mut out = vec![0.0; rows * cols];
    g.for_each_tap(|dst, src| {
        if let Some(s) = src {
            out[dst] = x.data[s];
        }
    });
    Tensor::new(vec![rows, cols], out)
}

/// Adjoint of [`im2col_batch`]: scatter-add columns back to `B×C×H×W`.
pub fn col2im_batch(cols: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    if cols.shape() != [g.patch_len(), g.batch * g.positions()] {
        return shape_err(format!("col2im columns {:?} do not match geometry {g:?}", cols.shape()));
    }
    let mut out = vec![0.0; g.input_shape().iter().product()];
    g.for_each_tap(|src, dst| {
        if let Some(d) = dst {
            out[d] += cols.data[src];
        }
    });
    Tensor::new(g.input_shape().to_vec(), out)
}

/// Single-image im2col on a `C×H×W` tensor.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return shape_err(format!("im2col expects C×H×W, got {:?}", x.shape()));
    }
    let g = ConvGeometry::new(x.shape(), kh, kw, stride, pad)?;
    im2col_batch(x, &g)
}
