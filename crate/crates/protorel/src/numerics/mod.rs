//! Dense f64 tensors with a tape-based reverse-mode differentiation graph.
//!
//! Forward passes record primitive applications into a [`Graph`]; a single
//! [`Graph::backward`] call then yields gradients for every reachable leaf.
//! Graphs are cheap, append-only, and rebuilt per episode rather than reused.
//! Everything is 64-bit: gradient checking against central finite differences
//! needs the headroom.

mod check;
mod graph;

pub use check::grad_check;
pub use graph::{Graph, NodeId};

use rand::Rng;
use thiserror::Error;

/// Errors from tensor construction, graph recording, and parameter updates.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: non-finite constant {value}")]
    NonFiniteConstant { op: &'static str, value: f64 },
    #[error("embedding lookup: row {index} out of bounds for table with {rows} rows")]
    LookupOutOfBounds { index: usize, rows: usize },
    #[error("conv1d: window width {width} must be at least 1")]
    BadWindow { width: usize },
    #[error("conv1d: true length {true_len} outside [1, {rows}]")]
    BadTrueLength { true_len: usize, rows: usize },
    #[error("cross-entropy: target {target} out of range for distribution of length {len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("cross-entropy: distribution sums to {sum:e}, not 1")]
    NotNormalized { sum: f64 },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("parameter {index} has no node id; register it as a graph leaf first")]
    MissingNodeId { index: usize },
    #[error("parameter {index} (node {id}) has no gradient entry")]
    MissingGradient { index: usize, id: usize },
    #[error("non-finite gradient in parameter update")]
    NonFiniteGradient,
    #[error("learning rate must be finite and non-negative, got {lr}")]
    BadLearningRate { lr: f64 },
    #[error("grad_check: eps {eps:e} outside [1e-7, 1e-3]")]
    BadEps { eps: f64 },
    #[error("grad_check: two forward passes disagree ({a} vs {b}); computation is not deterministic")]
    NonDeterministic { a: f64, b: f64 },
}

/// Dense row-major tensor of 64-bit floats.
///
/// `node_id` links the value to the node most recently registered for it in a
/// [`Graph`] (see [`Graph::param`]); it is metadata only and never affects the
/// stored values.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            node_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            node_id: None,
        }
    }

    /// Shape-`[1]` tensor; scalars are one-element vectors throughout.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node_id: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            node_id: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Every element drawn independently from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            node_id: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the elements. Mutating a tensor never touches values
    /// already recorded inside a graph (those are independent copies).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw f64 bit patterns, for bitwise equality checks.
    pub fn bits(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// One plain SGD step, `p <- p - lr * g`, elementwise.
///
/// `lr == 0` is a bitwise no-op (no multiply is performed, so signed zeros
/// survive untouched).
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<(), TensorError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(TensorError::BadLearningRate { lr });
    }
    if param.shape != grad.shape {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            left: param.shape.clone(),
            right: grad.shape.clone(),
        });
    }
    if !grad.all_finite() {
        return Err(TensorError::NonFiniteGradient);
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in param.data.iter_mut().zip(&grad.data) {
        *p -= lr * g;
    }
    Ok(())
}

/// Update several parameters from the gradients recorded in `graph`.
///
/// Each parameter must have been registered via [`Graph::param`] on the graph
/// that produced the gradients; a parameter the loss never reached is a
/// missing-entry error here (use [`Graph::gradient_or_zeros`] plus
/// [`sgd_step`] to treat unreachable parameters as zero-gradient instead).
/// Validation runs over all parameters before any of them is touched.
pub fn sgd_update(params: &mut [&mut Tensor], graph: &Graph, lr: f64) -> Result<(), TensorError> {
    let mut ids = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let id = p.node_id().ok_or(TensorError::MissingNodeId { index })?;
        let grad = graph
            .gradient(id)
            .ok_or(TensorError::MissingGradient {
                index,
                id: id.index(),
            })?;
        if p.shape() != grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_update",
                left: p.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(TensorError::NonFiniteGradient);
        }
        ids.push(id);
    }
    for (p, id) in params.iter_mut().zip(ids) {
        let grad = graph.gradient(id).expect("validated above");
        sgd_step(p, grad, lr)?;
    }
    Ok(())
}
