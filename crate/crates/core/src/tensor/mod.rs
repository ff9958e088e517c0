//! Dense n-dimensional arrays and a reverse-mode autodiff tape over them.
//!
//! [`Tensor`] is plain row-major storage. Gradient tracking lives on a
//! [`Tape`]: leaves are registered with [`Tape::param`] (tracked) or
//! [`Tape::constant`] (untracked), every primitive records its parents, and
//! [`Tape::backward`] replays the record in reverse.

pub mod gradcheck;
mod scalar;
mod tape;

pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub(crate) use tape::rope_row;

use std::fmt;

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index {index} out of range for extent {extent} in {op}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array.
///
/// A rank-0 tensor (shape `[]`) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                reason: format!("expects {n} values, got {}", data.len()),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                reason: format!("cannot reshape {:?} into it", self.shape),
                shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts element type, rounding through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Euclidean norm accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Entry of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Leading-dimension broadcast of `a` and `b`.
///
/// Shapes conform when they are equal, or when one operand with its leading
/// singleton dims stripped is a suffix of the other.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead..]
    }
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let small = strip(small);
    if big.len() >= small.len() && big.ends_with(small) {
        Some(big.to_vec())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_storage() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::scalar(3.0).len(), 1);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[3], &[4, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[5, 2, 3], &[1, 2, 3]), Some(vec![5, 2, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[4, 1]), None);
        assert_eq!(broadcast_shape(&[4, 3], &[2]), None);
    }
}
