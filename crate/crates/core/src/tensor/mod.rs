//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor is an immutable node in a dynamically built graph. Operations
//! that touch a tensor with `requires_grad` record a backward closure and keep
//! their parents alive; [`backward`] walks the graph in reverse topological
//! order. Summation order inside every kernel is fixed (ascending index), so
//! identical inputs always produce bit-identical outputs.

mod backward;
pub(crate) mod kernels;
mod ops;
mod param;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;
use thiserror::Error;

pub use backward::{backward, backward_with, Gradients};
pub use ops::{
    add, add_row, attention_core, concat_cols, cross_entropy, gather_rows, layer_norm, matmul,
    mul, relu, scale, softmax_rows, sum, LAYER_NORM_EPS,
};
pub use param::{sgd_step, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by an earlier backward call")]
    GraphAlreadyConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Floating point element type. `f32` for training, `f64` for oracle tests.
pub trait Scalar: Float + Default + fmt::Debug + Send + Sync + 'static {
    /// Width in bytes; doubles as the wire precision tag.
    const BYTES: usize;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
    consumed: AtomicBool,
    /// Elements saved by the op beyond its output (e.g. softmax probabilities).
    aux_elems: usize,
}

/// Shared handle to an immutable tensor node.
pub struct Tensor<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor without gradient tracking.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor whose gradient is collected by [`backward`].
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(shape_err("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape, data, requires_grad, None, 0))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![T::zero(); n], false, None, 0)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v], false, None, 0)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
        aux_elems: usize,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
            consumed: AtomicBool::new(false),
            aux_elems,
        }))
    }

    /// Records an op result. Gradient tracking is attached only when a parent
    /// requires it.
    pub(crate) fn record(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        aux_elems: usize,
        backward: BackwardFn<T>,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::from_parts(
                shape,
                data,
                true,
                Some(GradFn { parents, backward }),
                aux_elems,
            )
        } else {
            Self::from_parts(shape, data, false, None, 0)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Gradient stored by the most recent backward pass that reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn set_grad(&self, g: Vec<T>) {
        *self.0.grad.lock().expect("grad lock poisoned") = Some(g);
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<T>> {
        self.0.grad_fn.as_ref()
    }

    pub(crate) fn mark_consumed(&self) -> bool {
        self.0.consumed.swap(true, Ordering::SeqCst)
    }

    pub fn aux_elems(&self) -> usize {
        self.0.aux_elems
    }

    /// Copy of the values as a fresh leaf, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None, 0)
    }

    /// Deep copy as a new gradient-collecting leaf.
    pub fn detach_param(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), true, None, 0)
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("non-empty shape")
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(op, format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data()
                .iter()
                .zip(other.data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Bytes held by this node's output and saved auxiliaries.
    pub fn node_bytes(&self) -> usize {
        (self.numel() + self.0.aux_elems) * T::BYTES
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

/// Bytes held by every node reachable from `root`, excluding leaves whose id
/// is in `exclude` (typically parameters accounted elsewhere).
pub fn graph_bytes<T: Scalar>(root: &Tensor<T>, exclude: &std::collections::HashSet<u64>) -> usize {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    let mut total = 0;
    while let Some(t) = stack.pop() {
        if !seen.insert(t.id()) || exclude.contains(&t.id()) {
            continue;
        }
        total += t.node_bytes();
        if let Some(gf) = t.grad_fn() {
            stack.extend(gf.parents.iter().cloned());
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn detach_cuts_graph() {
        let a = Tensor::<f64>::param(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = scale(&a, 2.0).unwrap();
        assert!(b.requires_grad() && !b.is_leaf());
        let c = b.detach();
        assert!(!c.requires_grad() && c.is_leaf());
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn graph_bytes_counts_unique_nodes() {
        let a = Tensor::<f32>::param(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = add(&a, &a).unwrap();
        let c = add(&b, &b).unwrap();
        let mut ex = std::collections::HashSet::new();
        assert_eq!(graph_bytes(&c, &ex), 3 * 16);
        ex.insert(a.id());
        assert_eq!(graph_bytes(&c, &ex), 2 * 16);
    }
}
