//! Dense NCHW tensors and the numeric kernels built on them.

mod conv;
mod filter;

pub use conv::{conv2d, conv2d_backward, conv2d_direct, conv2d_with, ConvAlgo, ConvGeom, ConvGrads};
pub use filter::{filter2d_reflect, gaussian_kernel, high_pass};

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-axis extent in `(n, c, h, w)` order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Channel vector, used for biases and per-objective weights.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, len, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub(crate) fn expect_eq(&self, other: &Shape, op: &'static str) -> Result<()> {
        let names = ["n", "c", "h", "w"];
        for ((a, b), axis) in self.dims().into_iter().zip(other.dims()).zip(names) {
            if a != b {
                return Err(Error::dim(op, axis, a, b));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW array. Operations return new tensors and never mutate
/// their inputs.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim("tensor", "data", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn vector(values: &[T]) -> Self {
        Tensor {
            shape: Shape::vector(values.len()),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::dim("reshape", "numel", self.data.len(), shape.numel()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::arg("item", format!("expected one element, got {}", self.data.len()))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.expect_eq(&other.shape, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::domain("sum", "empty tensor"));
        }
        Ok(pairwise_sum(&self.data))
    }

    pub fn mean(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::domain("mean", "empty tensor"));
        }
        Ok(pairwise_sum(&self.data) / T::of(self.data.len() as f64))
    }

    /// Per-channel spatial average, `[n,c,h,w] -> [n,c,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let s = self.shape;
        if s.plane() == 0 || s.numel() == 0 {
            return Err(Error::domain("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::of(s.plane() as f64);
        let data = self
            .data
            .chunks(s.plane())
            .map(|p| pairwise_sum(p) / inv)
            .collect();
        Ok(Tensor {
            shape: Shape::new(s.n, s.c, 1, 1),
            data,
        })
    }

    /// Batch item `i` as a `[1,c,h,w]` tensor.
    pub fn select_batch(&self, i: usize) -> Result<Self> {
        if i >= self.shape.n {
            return Err(Error::dim("select_batch", "n", self.shape.n, i));
        }
        let item = self.shape.item();
        Ok(Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[i * item..(i + 1) * item].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_batch", "no inputs"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let (a, b) = (first.shape, p.shape);
            Shape::new(0, a.c, a.h, a.w).expect_eq(&Shape::new(0, b.c, b.h, b.w), "concat_batch")?;
            n += b.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.shape.c, first.shape.h, first.shape.w),
            data,
        })
    }

    /// `Σ_i weights[i] · terms[i]`, accumulated in index order.
    pub fn weighted_sum(weights: &[T], terms: &[&Self]) -> Result<Self> {
        if weights.len() != terms.len() {
            return Err(Error::dim("weighted_sum", "p", terms.len(), weights.len()));
        }
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::arg("weighted_sum", "empty bank"))?;
        let mut out = first.scale(weights[0]);
        for (t, &w) in rest.iter().zip(&weights[1..]) {
            out.shape.expect_eq(&t.shape, "weighted_sum")?;
            for (o, &v) in out.data.iter_mut().zip(&t.data) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.shape.expect_eq(&other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pairwise (cascade) summation; error grows as O(log n) instead of O(n).
pub(crate) fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        xs.iter().fold(T::zero(), |a, &b| a + b)
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}
