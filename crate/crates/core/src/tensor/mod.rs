//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every op records its inputs on the output node when any input requires a
//! gradient. Node ids are drawn from a global monotone counter, so sorting
//! the nodes reachable from a loss by descending id is a valid reverse
//! schedule: that ordering is the tape.
//!
//! ```
//! use latte_core::tensor::Tensor;
//!
//! let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(&x), vec![2.0, 4.0]);
//! ```

mod autograd;
mod element;
pub mod mutation;
mod ops;
mod shape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use autograd::Gradients;
pub use element::num_like::FloatLike;
pub use element::{DType, Element};
pub use shape::numel;
pub(crate) use ops::{phi_cdf, phi_pdf};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor<T: Element>(Arc<Node<T>>);

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    kind: Kind<T>,
}

enum Kind<T: Element> {
    Constant,
    Leaf,
    Op(Op<T>),
}

/// Recorded operation; each variant keeps exactly what its backward needs.
pub(crate) enum Op<T: Element> {
    /// `a + b`, `b`'s shape a suffix of `a`'s.
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    /// `a * b`, `b`'s shape a suffix of `a`'s.
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    /// `a [.., m, k] · b` where `b` is `[k, n]` (shared) or `[.., k, n]`.
    MatMul(Tensor<T>, Tensor<T>),
    /// `a [.., m, k] · bᵀ` with `b` `[.., n, k]`.
    MatMulT(Tensor<T>, Tensor<T>),
    Reshape(Tensor<T>),
    Permute(Tensor<T>, Vec<usize>),
    Narrow {
        input: Tensor<T>,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
    },
    ExpandLeading(Tensor<T>),
    Softmax {
        input: Tensor<T>,
        axis: usize,
    },
    /// Softmax over the last axis restricted to the first `valid` entries.
    MaskedSoftmax {
        input: Tensor<T>,
        valid: usize,
    },
    LayerNorm {
        input: Tensor<T>,
        rstd: Vec<T>,
    },
    /// Elementwise map with its derivative evaluated during the forward pass.
    Map {
        input: Tensor<T>,
        deriv: Vec<T>,
        name: &'static str,
    },
    Sum(Tensor<T>),
    Rope {
        input: Tensor<T>,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::ExpandLeading(..) => "expand",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Map { name, .. } => name,
            Op::Sum(..) => "sum",
            Op::Rope { .. } => "rope",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulT(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::ExpandLeading(a)
            | Op::Sum(a) => vec![a],
            Op::Narrow { input, .. }
            | Op::Softmax { input, .. }
            | Op::MaskedSoftmax { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::Map { input, .. }
            | Op::Rope { input, .. } => vec![input],
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }
}

pub(crate) fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Element> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, kind: Kind<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            kind,
        }))
    }

    /// Builds an op output. The op is only recorded when some input is
    /// differentiable; otherwise the result is a constant.
    pub(crate) fn from_op(op: Op<T>, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_finite(op.name(), &data)?;
        let track = op.inputs().iter().any(|t| t.tracks_grad());
        let kind = if track { Kind::Op(op) } else { Kind::Constant };
        Ok(Self::from_parts(shape, data, kind))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape("from_vec", format!("zero extent in {shape:?}")));
        }
        check_finite("from_vec", &data)?;
        Ok(Self::from_parts(shape.to_vec(), data, Kind::Constant))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], Kind::Constant)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value], Kind::Constant)
    }

    /// Same values, registered as a differentiable leaf.
    pub fn requires_grad(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), Kind::Leaf)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), Kind::Constant)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.kind, Kind::Leaf)
    }

    pub fn tracks_grad(&self) -> bool {
        !matches!(self.0.kind, Kind::Constant)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        match &self.0.kind {
            Kind::Op(op) => Some(op),
            _ => None,
        }
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Converts to another element type as a new constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.0.shape.clone(),
            self.0.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            Kind::Constant,
        )
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .finish()
    }
}
