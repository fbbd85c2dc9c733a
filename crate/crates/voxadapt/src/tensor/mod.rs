//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! Tensors are row-major with explicit shapes; a rank-0 shape is a scalar.
//! Differentiable programs are recorded on a [`tape::Tape`] and gradients
//! are produced by a single reverse sweep.

pub mod conv;
pub mod params;
pub mod tape;

use thiserror::Error;

/// Errors raised by tensor construction, tape ops, and optimizers.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: shape mismatch, expected {expected:?} but got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("gradient requested for {0}, which the loss does not reach")]
    MissingGradient(String),
}

impl TensorError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument(msg.into())
    }
}

/// A dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::invalid(format!(
                "item() needs exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks `other` after `self` along the leading (batch) dimension.
    pub fn concat_batch(&self, other: &Tensor) -> Result<Self, TensorError> {
        if self.rank() == 0 || other.rank() == 0 || self.shape[1..] != other.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                context: "concat_batch",
                expected: self.shape.clone(),
                got: other.shape().to_vec(),
            });
        }
        let mut shape = self.shape.clone();
        shape[0] += other.shape()[0];
        let mut data = self.data.clone();
        data.extend_from_slice(other.data());
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Mean absolute difference against `other`; the shared scalar loss core.
    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                context: "mean_abs_diff",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        if self.data.is_empty() {
            return Err(TensorError::invalid("mean_abs_diff over empty tensor"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// FNV-1a digest over the exact bit patterns; detects any parameter drift.
    pub fn bits_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for dim in &self.shape {
            h = fnv_step(h, *dim as u64);
        }
        for v in &self.data {
            h = fnv_step(h, v.to_bits());
        }
        h
    }
}

fn fnv_step(mut h: u64, word: u64) -> u64 {
    for byte in word.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Row-major strides for `shape`.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
