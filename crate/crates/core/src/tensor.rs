//! Dense NCHW tensors, convolution geometry and the im2col feature matrix.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Real scalar the engine computes in. Forward passes and training use `f32`;
/// gradient checks instantiate everything with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense 4-D array in row-major `(n, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `(c, h, w)` block of batch item `n`.
    pub fn item_slice(&self, n: usize) -> &[T] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Batch item `n` as its own 1-item tensor.
    pub fn item(&self, n: usize) -> Tensor<T> {
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.item_slice(n).to_vec(),
        }
    }

    /// Concatenates 1-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape(format!(
                    "stack: {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "zip")?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Kernel geometry of a 2-D convolution. Padding is always zero-valued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvParams {
    /// Square kernel with equal stride, padding and dilation on both axes.
    pub fn square(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
        }
    }

    /// Stride-1 kernel with padding chosen so spatial dims are preserved.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::square(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((h + 2p - d(k-1) - 1)/s) + 1` on both axes.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        let ho = axis(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let wo = axis(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::invalid(format!(
                "{self:?} on a {h}x{w} input yields no output locations"
            ))),
        }
    }

    /// Output dims of the transposed convolution with these params.
    pub fn transposed_output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            if len == 0 {
                return None;
            }
            let full = (len - 1) * s + d * (k - 1) + 1;
            (full > 2 * p).then(|| full - 2 * p)
        };
        let ho = axis(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let wo = axis(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::invalid(format!(
                "transposed {self:?} on a {h}x{w} input yields no output locations"
            ))),
        }
    }
}

/// Window geometry for max/avg pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    /// Round the output size up, letting the last window hang over the edge.
    pub ceil_mode: bool,
}

impl PoolParams {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            padding: 0,
            ceil_mode: false,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("pool window and stride must be positive"));
        }
        let axis = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < self.window {
                return Err(Error::invalid(format!(
                    "pool window {} larger than input {len}",
                    self.window
                )));
            }
            let span = padded - self.window;
            let mut out = if self.ceil_mode {
                span.div_ceil(self.stride) + 1
            } else {
                span / self.stride + 1
            };
            // The last window must start inside the input or left padding.
            if self.ceil_mode && (out - 1) * self.stride >= len + self.padding {
                out -= 1;
            }
            Ok(out)
        };
        Ok((axis(h)?, axis(w)?))
    }
}

/// im2col lowering of one batch item: one row per output location, columns in
/// `(channel, kernel row, kernel column)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T = f32> {
    rows: usize,
    cols: usize,
    grid: (usize, usize),
    data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, grid: (usize, usize), data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            grid,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, grid: (usize, usize)) -> Self {
        Self {
            rows,
            cols,
            grid,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The `(H_out, W_out)` grid this matrix was lowered from.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Grid location `(y, x)` of row `r` when rows cover the full grid.
    pub fn location(&self, r: usize) -> (usize, usize) {
        (r / self.grid.1, r % self.grid.1)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}
