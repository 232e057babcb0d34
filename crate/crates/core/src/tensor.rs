//! Dense NCHW `f32` tensors.

use std::fmt;

use thiserror::Error;

/// Largest element count a tensor may hold unless a caller asks for another cap.
pub const DEFAULT_ELEMENT_CAP: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {0} has a zero dimension")]
    ZeroDimension(Shape),
    #[error("allocation refused: {requested} elements exceeds the cap of {cap} elements")]
    AllocationRefused { requested: u128, cap: usize },
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
}

/// Four-dimensional extent in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        let shape = Shape { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(TensorError::ZeroDimension(shape));
        }
        Ok(shape)
    }

    /// Element count widened so that hostile dimensions cannot overflow.
    pub fn checked_len(&self) -> u128 {
        self.n as u128 * self.c as u128 * self.h as u128 * self.w as u128
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat row-major offset of `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Rejects shapes with zero dimensions or more than `cap` elements.
    pub fn check(&self, cap: usize) -> Result<(), TensorError> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(TensorError::ZeroDimension(*self));
        }
        let requested = self.checked_len();
        if requested > cap as u128 {
            return Err(TensorError::AllocationRefused { requested, cap });
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Tensor of `shape` with every element set to `fill`.
    pub fn full(shape: Shape, fill: f32) -> Result<Self, TensorError> {
        Self::full_with_cap(shape, fill, DEFAULT_ELEMENT_CAP)
    }

    pub fn full_with_cap(shape: Shape, fill: f32, cap: usize) -> Result<Self, TensorError> {
        shape.check(cap)?;
        Ok(Tensor {
            shape,
            data: vec![fill; shape.len()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        shape.check(DEFAULT_ELEMENT_CAP)?;
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn view(&self) -> TensorView<'_> {
        TensorView {
            shape: self.shape,
            data: &self.data,
        }
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True iff shapes match and `|x - y| <= abs_tol + rel_tol * |y|` holds elementwise.
    pub fn allclose(&self, other: &Tensor, rel_tol: f32, abs_tol: f32) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&x, &y)| (x - y).abs() <= abs_tol + rel_tol * y.abs())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max),
        )
    }
}

/// Borrowed tensor, used by kernels that read from arena slots.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub shape: Shape,
    pub data: &'a [f32],
}

impl<'a> TensorView<'a> {
    pub fn new(shape: Shape, data: &'a [f32]) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        TensorView { shape, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.to_vec(),
        }
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &'a [f32] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }
}
