//! Five-axis activation tensor ordered `(batch, channel, depth, height, width)`.
//!
//! All network math runs on [`Tensor5`]. Data is a flat row-major buffer with
//! `w` fastest; the element type is generic over [`Scalar`] so the same
//! kernels run in single precision for training and double precision for
//! gradient checks.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of tensors and volumes (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + Send + Sync + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }
    fn from_usize_c(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to any Scalar")
    }
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// A dense 5-axis tensor with shape `(n, c, d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Self { shape, data })
    }

    /// Build from a generator over `(n, c, d, h, w)` indices.
    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, d, h, w] = shape;
        let mut i = 0;
        for bn in 0..n {
            for bc in 0..c {
                for bd in 0..d {
                    for bh in 0..h {
                        for bw in 0..w {
                            t.data[i] = f(bn, bc, bd, bh, bw);
                            i += 1;
                        }
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[4]
    }

    /// Spatial extents `(d, h, w)`.
    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of `(n, c, d, h, w)`.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((((n * self.shape[1]) + c) * self.shape[2] + d) * self.shape[3] + h) * self.shape[4] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, d, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Convert elementwise to another scalar type via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 { shape: self.shape, data: self.data.iter().map(|v| U::from_f64_c(v.to_f64_c())).collect() }
    }
}
