//! Dense row-major tensors and the forward kernels used by the model.
//!
//! Three-dimensional tensors are feature maps laid out channel-major
//! (`channel, row, column`). Every kernel here is a pure function; the
//! differentiable wrappers live in [`crate::tape`].

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

/// Floating point element type. Training and inference run in `f32`;
/// gradient checks run in `f64`.
pub trait Real: Float + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a C×H×W feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_mismatch("add", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

impl<T: Real> fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Output extents of `mul_broadcast`: same rank, each pair of extents equal
/// or one of them 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_mismatch("mul_broadcast", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_mismatch("mul_broadcast", a, b)),
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `src_shape` broadcast to it.
pub(crate) fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_strides = strides(out_shape);
    let src_strides = strides(src_shape);
    let n: usize = out_shape.iter().product();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for d in 0..out_shape.len() {
                let coord = rem / out_strides[d];
                rem %= out_strides[d];
                if src_shape[d] != 1 {
                    idx += coord * src_strides[d];
                }
            }
            idx
        })
        .collect()
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub mod ops {
    //! Forward kernels.

    use super::*;

    /// Zero-padded "same" cross-correlation. `padding` must equal `(K - 1) / 2`.
    pub fn conv2d<T: Real>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (cin, h, w) = input.dims3()?;
        let (cout, wcin, kh, kw) = match weights.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_mismatch("conv2d", input.shape(), weights.shape())),
        };
        if wcin != cin || kh != kw {
            return Err(shape_mismatch("conv2d", input.shape(), weights.shape()));
        }
        if kh % 2 == 0 || padding * 2 + 1 != kh {
            return Err(Error::InvalidArgument(format!(
                "conv2d needs an odd kernel with padding (K-1)/2, got K={kh} padding={padding}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_mismatch("conv2d bias", weights.shape(), b.shape()));
            }
        }
        let k = kh;
        let x = input.data();
        let wt = weights.data();
        let mut out = vec![T::zero(); cout * h * w];
        for co in 0..cout {
            let plane = &mut out[co * h * w..(co + 1) * h * w];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for ci in 0..cin {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                let kern = &wt[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        // output (y, x) reads input (y + ky - p, x + kx - p)
                        let y0 = padding.saturating_sub(ky);
                        let y1 = (h + padding).saturating_sub(ky).min(h);
                        let x0 = padding.saturating_sub(kx);
                        let x1 = (w + padding).saturating_sub(kx).min(w);
                        for oy in y0..y1 {
                            let iy = oy + ky - padding;
                            let orow = &mut plane[oy * w..(oy + 1) * w];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                orow[ox] = orow[ox] + wv * irow[ox + kx - padding];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![cout, h, w], out)
    }

    /// Per-channel reduction over all spatial positions: `C×H×W -> C`.
    pub fn pool_spatial<T: Real>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3()?;
        let hw = h * w;
        let out = input
            .data()
            .chunks_exact(hw)
            .map(|plane| reduce(plane.iter().copied(), hw, mode).0)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), c);
        Ok(Tensor::from_vec(out))
    }

    /// Reduction across channels at every position: `C×H×W -> 1×H×W`.
    pub fn pool_channel<T: Real>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3()?;
        let hw = h * w;
        let x = input.data();
        let out = (0..hw)
            .map(|p| reduce((0..c).map(|ch| x[ch * hw + p]), c, mode).0)
            .collect();
        Tensor::new(vec![1, h, w], out)
    }

    /// Returns the reduced value and, for max, the position of the first
    /// maximum within the iteration order.
    pub(crate) fn reduce<T: Real>(
        values: impl Iterator<Item = T>,
        count: usize,
        mode: PoolMode,
    ) -> (T, usize) {
        match mode {
            PoolMode::Avg => (values.sum::<T>() / T::lit(count as f64), 0),
            PoolMode::Max => {
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for (i, v) in values.enumerate() {
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                (best, arg)
            }
        }
    }

    /// `w·x + b` for a rank-1 `x`.
    pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.len();
        let m = match w.shape()[..] {
            [m, k] if k == n && x.shape().len() == 1 => m,
            _ => return Err(shape_mismatch("linear", x.shape(), w.shape())),
        };
        if b.shape() != [m] {
            return Err(shape_mismatch("linear bias", w.shape(), b.shape()));
        }
        let out = w
            .data()
            .chunks_exact(n)
            .zip(b.data())
            .map(|(row, &bi)| row.iter().zip(x.data()).map(|(&a, &v)| a * v).sum::<T>() + bi)
            .collect();
        Ok(Tensor::from_vec(out))
    }

    pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()))
    }

    pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        x.map(sigmoid_scalar)
    }

    /// Two-layer perceptron `w2·relu(w1·x + b1) + b2`, no output nonlinearity.
    pub fn mlp2<T: Real>(
        x: &Tensor<T>,
        w1: &Tensor<T>,
        b1: &Tensor<T>,
        w2: &Tensor<T>,
        b2: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let hidden = relu(&linear(x, w1, b1)?);
        linear(&hidden, w2, b2)
    }

    /// Elementwise product where every extent pair is equal or one side is 1.
    pub fn mul_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let ia = broadcast_index_map(a.shape(), &shape);
        let ib = broadcast_index_map(b.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| a.data()[i] * b.data()[j])
            .collect();
        Tensor::new(shape, data)
    }

    /// Stacks two maps of equal spatial extent along the channel axis.
    pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ca, h, w) = a.dims3()?;
        let (cb, hb, wb) = b.dims3()?;
        if (h, w) != (hb, wb) {
            return Err(shape_mismatch("concat_channels", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::new(vec![ca + cb, h, w], data)
    }

    /// Half-open bin `[floor(i·n/bins), floor((i+1)·n/bins))`.
    pub fn bin_bounds(i: usize, bins: usize, n: usize) -> (usize, usize) {
        (i * n / bins, (i + 1) * n / bins)
    }

    pub(crate) fn check_levels(levels: &[usize], h: usize, w: usize) -> Result<()> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("spp needs at least one level".into()));
        }
        for &n in levels {
            if n == 0 || n > h || n > w {
                return Err(Error::InvalidArgument(format!(
                    "spp level {n} does not fit a {h}×{w} map"
                )));
            }
        }
        Ok(())
    }

    pub fn spp_len(channels: usize, levels: &[usize]) -> usize {
        channels * levels.iter().map(|n| n * n).sum::<usize>()
    }

    /// Spatial pyramid pooling. Level blocks follow `levels` order, bins are
    /// row-major inside a level and channels are contiguous inside a bin.
    pub fn spp<T: Real>(input: &Tensor<T>, levels: &[usize], mode: PoolMode) -> Result<Tensor<T>> {
        Ok(spp_with_argmax(input, levels, mode)?.0)
    }

    /// SPP plus, for max mode, the flat input index selected for each output.
    pub(crate) fn spp_with_argmax<T: Real>(
        input: &Tensor<T>,
        levels: &[usize],
        mode: PoolMode,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = input.dims3()?;
        check_levels(levels, h, w)?;
        let x = input.data();
        let len = spp_len(c, levels);
        let mut out = Vec::with_capacity(len);
        let mut arg = Vec::with_capacity(len);
        for &n in levels {
            for by in 0..n {
                let (y0, y1) = bin_bounds(by, n, h);
                for bx in 0..n {
                    let (x0, x1) = bin_bounds(bx, n, w);
                    let count = (y1 - y0) * (x1 - x0);
                    for ch in 0..c {
                        let positions = (y0..y1)
                            .flat_map(move |yy| (x0..x1).map(move |xx| ch * h * w + yy * w + xx));
                        let (v, k) = reduce(positions.clone().map(|i| x[i]), count, mode);
                        out.push(v);
                        arg.push(positions.clone().nth(k).unwrap_or(0));
                    }
                }
            }
        }
        Ok((Tensor::from_vec(out), arg))
    }

    /// `alpha · v / ‖v‖₂`.
    pub fn normalize_scale<T: Real>(v: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
        let norm = v.norm();
        if norm == T::zero() || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(v.map(|x| alpha * x / norm))
    }
}
