//! Dense 4-D tensors in NCHW layout.
//!
//! Everything in this crate moves through [`Tensor`]: activations, weights,
//! gradients, images. The layout is always `(n, c, h, w)` row-major with `w`
//! fastest, and the element type is a [`Scalar`] — `f32` for real workloads,
//! `f64` where tests need headroom for finite-difference comparisons.
//!
//! Lower-rank data is embedded by setting the unused dimensions to 1 (a bias
//! vector is `(c, 1, 1, 1)`, a pair-weight table `(o, c, 1, m)`), which keeps
//! one storage type flowing through the optimizer and the checkpoint code.

use crate::error::{shape_err, Result};

/// Floating-point element type. Implemented for `f32` and `f64` only; the
/// `DTYPE` tag is what the serialized tensor records store.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Size of one element on the wire.
    const BYTES: usize;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: u8 = $dtype;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn maxs(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn mins(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, 0, 4);
impl_scalar!(f64, 1, 8);

/// NCHW extent. `n` is the batch axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
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

    #[inline]
    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row-major offset of `(n, c, h, w)`.
    #[inline]
    pub const fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            shape_err!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            );
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// Reinterpret the same buffer under a new shape with an equal element
    /// count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            shape_err!("cannot reshape {} to {}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            shape_err!("elementwise op on {} vs {}", self.shape, other.shape);
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            shape_err!("add_assign on {} vs {}", self.shape, other.shape);
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Largest absolute difference against `other`; both shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            shape_err!("max_abs_diff on {} vs {}", self.shape, other.shape);
        }
        let mut m = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            m = m.max((a.to_f64() - b.to_f64()).abs());
        }
        Ok(m)
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Channel slab `[from, to)` of every image; used by the split layers.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.shape.c {
            shape_err!(
                "channel slice {}..{} out of bounds for {}",
                from,
                to,
                self.shape
            );
        }
        let s = self.shape;
        let out_shape = Shape::new(s.n, to - from, s.h, s.w);
        let plane = s.h * s.w;
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            let base = (n * s.c + from) * plane;
            data.extend_from_slice(&self.data[base..base + (to - from) * plane]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Concatenate along the channel axis; all inputs must agree on n/h/w.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            shape_err!("concat_channels on empty list");
        }
        let s0 = parts[0].shape;
        let mut c_total = 0;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                shape_err!("concat_channels mismatch: {} vs {}", s0, s);
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
        let plane = s0.h * s0.w;
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s0.n {
            for p in parts {
                let s = p.shape;
                let base = n * s.c * plane;
                data.extend_from_slice(&p.data[base..base + s.c * plane]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Scatter-add `other` (a channel slab) back into `self` at `from`.
    /// Inverse of `slice_channels` for gradient routing.
    pub fn add_into_channels(&mut self, from: usize, other: &Self) -> Result<()> {
        let s = self.shape;
        let o = other.shape;
        if o.n != s.n || o.h != s.h || o.w != s.w || from + o.c > s.c {
            shape_err!("add_into_channels {} at {} into {}", o, from, s);
        }
        let plane = s.h * s.w;
        for n in 0..s.n {
            let dst = (n * s.c + from) * plane;
            let src = n * o.c * plane;
            let span = o.c * plane;
            for i in 0..span {
                self.data[dst + i] += other.data[src + i];
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Tensor<T> {
        Tensor {
            shape: t.shape,
            data: t.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_is_row_major_w_fastest() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), s.len() - 1);
    }

    #[test]
    fn from_vec_validates_length() {
        let s = Shape::new(1, 1, 2, 2);
        assert!(Tensor::from_vec(s, vec![1.0f32; 4]).is_ok());
        assert!(Tensor::from_vec(s, vec![1.0f32; 5]).is_err());
    }

    #[test]
    fn channel_slice_and_concat_round_trip() {
        let s = Shape::new(2, 4, 3, 3);
        let t = Tensor::from_vec(s, (0..s.len()).map(|i| i as f32).collect()).unwrap();
        let a = t.slice_channels(0, 1).unwrap();
        let b = t.slice_channels(1, 4).unwrap();
        let back = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn add_into_channels_is_slice_adjoint() {
        // <slice(x), g> == <x, scatter(g)> for every slab.
        let s = Shape::new(1, 3, 2, 2);
        let x = Tensor::from_vec(s, (0..12).map(|i| (i as f64) * 0.5).collect()).unwrap();
        let g = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            (0..8).map(|i| (i as f64) - 3.0).collect(),
        )
        .unwrap();
        let sl = x.slice_channels(1, 3).unwrap();
        let lhs: f64 = sl
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let mut scat = Tensor::zeros(s);
        scat.add_into_channels(1, &g).unwrap();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(scat.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
