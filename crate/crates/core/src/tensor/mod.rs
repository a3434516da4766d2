//! Dense 4-D tensors in (batch, channel, height, width) order, the kernels
//! that operate on them, and a reverse-mode tape for training.

mod ops;
mod tape;

use std::fmt;
use std::ops::Range;

use thiserror::Error;

pub use ops::{
    activation, avg_pool, batch_norm, concat_channels, conv2d, max_pool2, sigmoid,
    upsample_nearest, Activation, BatchNormState, BnMode,
};
pub use tape::{BatchStats, BnForward, Gradients, Tape, Var};

pub(crate) use tape::gram_matrix;

pub(crate) use ops::{
    bias_grad, check_conv_args, conv_accumulate, conv_grad_input, conv_grad_weight,
    conv_output_extent,
};

/// Floating-point element type of a [`Tensor`].
///
/// Inner loops accumulate in `f64` regardless of the storage type, so the
/// trait only needs lossless-enough conversions to and from `f64`.
pub trait Scalar:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_acc(v: f64) -> Self;
    fn to_acc(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }
}

/// Extents in (batch, channel, height, width) order.
pub type Dims = [usize; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
    Kernel,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Batch => "batch",
            Axis::Channel => "channel",
            Axis::Height => "height",
            Axis::Width => "width",
            Axis::Kernel => "kernel",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch on the {axis} axis: expected {expected}, found {found}")]
    Dimension {
        axis: Axis,
        expected: usize,
        found: usize,
    },
    #[error("{found} values do not fill extents {dims:?}")]
    Length { dims: Dims, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("backward requires a scalar loss, got extents {0:?}")]
    NotScalar(Dims),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn check_axis(axis: Axis, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            axis,
            expected,
            found,
        })
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Wraps `data`, rejecting a length mismatch or any non-finite value.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length {
                dims,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor { dims, data })
    }

    /// Vector of length `len` laid out along the channel axis, `[1, len, 1, 1]`.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::from_vec([1, values.len(), 1, 1], values)
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
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
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Overwrites one element. Rejects non-finite values.
    pub fn set(&mut self, flat: usize, value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(flat));
        }
        self.data[flat] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_acc(v.to_acc())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Length {
                dims,
                found: self.data.len(),
            });
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    /// Copies channels `range` out of every batch item.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if range.start > range.end || range.end > c {
            return Err(TensorError::Dimension {
                axis: Axis::Channel,
                expected: c,
                found: range.end,
            });
        }
        let plane = h * w;
        let take = range.end - range.start;
        let mut data = Vec::with_capacity(n * take * plane);
        for b in 0..n {
            let start = (b * c + range.start) * plane;
            data.extend_from_slice(&self.data[start..start + take * plane]);
        }
        Ok(Tensor {
            dims: [n, take, h, w],
            data,
        })
    }

    /// Copies batch items `range`.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if range.start > range.end || range.end > n {
            return Err(TensorError::Dimension {
                axis: Axis::Batch,
                expected: n,
                found: range.end,
            });
        }
        let item = c * h * w;
        Ok(Tensor {
            dims: [range.end - range.start, c, h, w],
            data: self.data[range.start * item..range.end * item].to_vec(),
        })
    }

    /// Stacks tensors of identical (C, H, W) along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| {
            TensorError::Contract("cannot stack an empty list of tensors".into())
        })?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            check_axis(Axis::Channel, c, t.dims[1])?;
            check_axis(Axis::Height, h, t.dims[2])?;
            check_axis(Axis::Width, w, t.dims[3])?;
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_acc()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_acc() - b.to_acc()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == T::zero() || v == T::one())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}
