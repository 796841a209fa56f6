//! Dense 4-D tensors in (batch, channel, height, width) layout, row-major.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Extents of a 4-D tensor: (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Scalar shape used by losses.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major offset of (n, c, y, x).
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn is_scalar(&self) -> bool {
        self.count() == 1
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

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs} on dimension {dim}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
        dim: &'static str,
    },
    #[error("{op}: data length {len} does not match shape {shape} ({} values)", shape.count())]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Shape,
    },
    #[error("{op}: zero extent in shape {shape}; all extents must be >= 1")]
    ZeroExtent { op: &'static str, shape: Shape },
    #[error(
        "max_pool_2x2: spatial extent {h}x{w} is odd; pad inputs to even height and width first"
    )]
    OddPoolExtent { h: usize, w: usize },
    #[error("broadcast_mul: map shape {map} is neither (n,c,1,1) nor (n,1,h,w) for features {features}")]
    BadBroadcastMap { map: Shape, features: Shape },
    #[error("backward: loss must be scalar (1,1,1,1), got {0}")]
    NonScalarLoss(Shape),
    #[error("bce_loss: target value {value} outside [0,1] at flat index {index}")]
    TargetOutOfRange { value: f64, index: usize },
    #[error("{op}: kernel window {kernel}x{kernel} with dilation {dilation} and padding {padding} exceeds padded input {h}x{w}")]
    KernelTooLarge {
        op: &'static str,
        kernel: usize,
        dilation: usize,
        padding: usize,
        h: usize,
        w: usize,
    },
}

/// Dense 4-D array of scalars. Values are immutable once built into a graph;
/// mutation is confined to construction helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.count() == 0 {
            return Err(TensorError::ZeroExtent {
                op: "from_vec",
                shape,
            });
        }
        if data.len() != shape.count() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Single-image single-channel tensor from nested rows; test convenience.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let h = rows.len();
        let w = rows[0].len();
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            assert_eq!(r.len(), w, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: Shape::new(1, 1, h, w),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.at(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.at(n, c, y, x);
        self.data[i] = v;
    }

    /// Value of a scalar (1,1,1,1) tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Content fingerprint over the exact bit patterns; used by aliasing and
    /// determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0u64;
        for v in &self.data {
            acc = acc
                .wrapping_mul(0x100000001b3)
                .wrapping_add(Scalar::to_f64(*v).to_bits());
        }
        acc
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }
}

/// Guard used after every forward kernel: finite inputs must yield finite
/// outputs. Active in debug/test builds only.
#[inline]
pub fn debug_check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) {
    debug_assert!(t.is_finite(), "{op}: non-finite value in output");
    let _ = (op, t);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_offsets_are_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.count(), 120);
        assert_eq!(s.at(0, 0, 0, 0), 0);
        assert_eq!(s.at(0, 0, 0, 1), 1);
        assert_eq!(s.at(0, 0, 1, 0), 5);
        assert_eq!(s.at(0, 1, 0, 0), 20);
        assert_eq!(s.at(1, 0, 0, 0), 60);
        assert_eq!(s.at(1, 2, 3, 4), 119);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 3, .. }));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent { .. }));
    }

    #[test]
    fn checksum_detects_mutation() {
        let mut t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = t.checksum();
        t.set(0, 0, 1, 1, 5.0);
        assert_ne!(before, t.checksum());
    }
}
