//! Dense tensors and the differentiable op set.
//!
//! Values are stored as `f64` regardless of dtype. An `F32` tensor holds only
//! values that are exactly representable in single precision: every kernel
//! rounds its output through `f32` when the result dtype is `F32`. `I64`
//! tensors carry integer-valued data (token ids, labels) and are never
//! differentiated.

mod graph;
pub mod kernels;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use graph::{CustomOp, Graph, NodeId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cannot differentiate with respect to integer-valued node {node}")]
    IntegralGrad { node: usize },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("{op}: {msg}")]
    Custom { op: String, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::I64)
    }

    /// Rounds a value to what this dtype can hold.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
            DType::I64 => v.round(),
        }
    }

    pub(crate) fn round_slice(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }

    /// Result dtype of a float op over the given inputs: `F32` wins over `F64`.
    pub fn promote(a: DType, b: DType) -> DType {
        match (a, b) {
            (DType::F32, _) | (_, DType::F32) => DType::F32,
            _ => DType::F64,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "i64" => Ok(DType::I64),
            other => Err(format!("unknown dtype `{other}` (expected f32, f64 or i64)")),
        }
    }
}

/// Immutable dense row-major tensor. Cloning is cheap.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("dtype", &self.dtype);
        if self.data.len() <= 16 {
            s.field("data", &&self.data[..]);
        }
        s.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        let mut data = data;
        match dtype {
            DType::F32 => dtype.round_slice(&mut data),
            DType::I64 => {
                if let Some(bad) = data.iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
                    return Err(TensorError::Invalid {
                        op: "tensor",
                        msg: format!("i64 tensor holds non-integer value {bad}"),
                    });
                }
            }
            DType::F64 => {}
        }
        Ok(Self {
            shape,
            data: data.into(),
            dtype,
        })
    }

    /// Builds an `F64` tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), data, DType::F64)
    }

    pub fn from_indices(shape: &[usize], ids: &[usize]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            ids.iter().map(|&i| i as f64).collect(),
            DType::I64,
        )
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        Self {
            shape: vec![],
            data: vec![dtype.round(v)].into(),
            dtype,
        }
    }

    pub fn full(shape: &[usize], v: f64, dtype: DType) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![dtype.round(v); numel(shape)].into(),
            dtype,
        }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    /// Internal constructor for kernels that already rounded their output.
    pub(crate) fn from_raw(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        dtype.round_slice(&mut data);
        Self {
            shape,
            data: data.into(),
            dtype,
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn to_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v.max(0.0) as usize).collect()
    }

    pub fn with_dtype(&self, dtype: DType) -> Result<Tensor> {
        if dtype == self.dtype {
            return Ok(self.clone());
        }
        Tensor::new(self.shape.clone(), self.to_vec(), dtype)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − reference‖∞ / ‖reference‖∞`, zero when both are zero.
    pub fn rel_deviation(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        if diff == 0.0 {
            return Ok(0.0);
        }
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice(self, axis, start, len)
    }

    /// Splits evenly into `n` parts along `axis`.
    pub fn split(&self, axis: usize, n: usize) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "split",
                axis,
                rank: self.rank(),
            });
        }
        if n == 0 || !self.shape[axis].is_multiple_of(n) {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!(
                    "dim {axis} of size {} is not divisible into {n} parts",
                    self.shape[axis]
                ),
            });
        }
        let len = self.shape[axis] / n;
        (0..n).map(|i| self.slice_axis(axis, i * len, len)).collect()
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        kernels::concat(parts, axis)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut dtype = first.dtype;
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            dtype = if p.dtype.is_float() && dtype.is_float() {
                DType::promote(dtype, p.dtype)
            } else {
                dtype
            };
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_raw(shape, data, dtype))
    }

    /// Entry `index` along the leading axis, with that axis removed.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        if self.rank() == 0 || index >= self.shape[0] {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("index {index} out of range for shape {:?}", self.shape),
            });
        }
        let inner = numel(&self.shape[1..]);
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].into(),
            dtype: self.dtype,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }
}
