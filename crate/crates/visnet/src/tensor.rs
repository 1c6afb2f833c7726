//! Dense row-major tensors in double precision.
//!
//! Every feature map, parameter, and gradient in the crate is carried by
//! [`Tensor`]: a shape vector plus a flat `Vec<f64>`. Gradient buffers are
//! attached by the tape after a backward pass.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} contains a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("{context}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        context: String,
        expected: usize,
        got: Vec<usize>,
    },
    #[error(
        "batch statistics undefined: {count} value(s) per channel in train mode (need at least 2)"
    )]
    DegenerateBatch { count: usize },
    #[error("bilinear upsample cannot shrink {from:?} to {to:?}")]
    UnsupportedDownsample {
        from: (usize, usize),
        to: (usize, usize),
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeReused,
    #[error("class target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value while evaluating objective at parameter '{param}' element {index}")]
    NonFiniteEvaluation { param: String, index: usize },
    #[error("{context}: {message}")]
    InvalidArgument { context: String, message: String },
}

impl TensorError {
    pub(crate) fn dim(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        TensorError::DimensionMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn arg(context: &str, message: impl ToString) -> Self {
        TensorError::InvalidArgument {
            context: context.to_string(),
            message: message.to_string(),
        }
    }
}

/// Dense N-dimensional array of `f64` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: consistent by construction")
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar: consistent by construction")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor::new(shape, data).expect("from_fn: consistent by construction")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Flat index for a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }
}
