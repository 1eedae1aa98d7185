//! Dense rank-4 `(batch, channel, height, width)` float tensors.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor in `(N, C, H, W)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of elements in one `(H, W)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub const fn with_spatial(&self, h: usize, w: usize) -> Self {
        Shape::new(self.n, self.c, h, w)
    }

    pub const fn with_channels(&self, c: usize) -> Self {
        Shape::new(self.n, c, self.h, self.w)
    }

    /// Row-major strides.
    pub const fn strides(&self) -> [usize; 4] {
        [self.c * self.h * self.w, self.h * self.w, self.w, 1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `f32` storage with a fixed [`Shape`].
///
/// Values are immutable once a tensor enters a [`Graph`](crate::autograd::Graph);
/// gradients live on the graph node, not on the tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// A `(1, 1, 1, len)` tensor, handy for one-dimensional examples.
    pub fn row(values: &[f32]) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, values.len()),
            data: values.to_vec(),
        }
    }

    /// A single `(1, 1, H, W)` plane from nested rows.
    pub fn plane2d(rows: &[&[f32]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == w), "ragged rows");
        Tensor {
            shape: Shape::new(1, 1, h, w),
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// The `(H, W)` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data viewed under another shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {} vs {}",
                self.shape, other.shape
            )));
        }
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

    /// Adds `other` into `self` elementwise. Shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Largest value, ignoring NaN. `-inf` for an all-`-inf` tensor.
    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elements `[start, start + count)` along the batch axis.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n {
            return Err(Error::shape(format!(
                "batch range {start}..{} out of bounds for {}",
                start + count,
                self.shape
            )));
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(count, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!("cannot stack {} with {}", t.shape, s)));
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn neg_infinity_is_neutral_for_max() {
        let t = Tensor::row(&[f32::NEG_INFINITY, 3.0]);
        assert_eq!(t.max_value(), 3.0);
        assert_eq!(f32::NEG_INFINITY.max(-7.5), -7.5);
    }

    #[test]
    fn index_is_row_major() {
        let t = Tensor::new(Shape::new(2, 3, 4, 5), (0..120).map(|x| x as f32).collect()).unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
    }

    #[test]
    fn stack_and_narrow_batch() {
        let a = Tensor::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::full(Shape::new(2, 2, 2, 2), 2.0);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 2, 2, 2));
        assert_eq!(s.narrow_batch(1, 2).unwrap(), b);
    }
}
