//! Minimal reverse-mode autodiff tensor engine.
//!
//! Tensors are immutable n-dimensional float arrays in row-major layout.
//! Every operation records its parents on the tensor it produces; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! creation order and accumulates gradients into every `requires_grad`
//! leaf. Operations on tensors that neither require gradients nor descend
//! from one record nothing, so frozen-network forwards carry no graph.
//!
//! The element type is generic over [`Real`]: `f32` in production, `f64`
//! in gradient-check tests.

pub mod conv;
pub mod gradcheck;
mod ops;


pub use ops::Op;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type of tensors: `f32` for production models, `f64` for
/// finite-difference gradient checks.
pub trait Real:
    num_traits::Float + std::iter::Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {axis}: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tensor; rebuild the graph before calling it again")]
    RepeatedBackward,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node<R: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<R>>,
    grad: RefCell<Option<Vec<R>>>,
    requires_grad: bool,
    /// True when this tensor participates in a gradient path.
    track: bool,
    record: Option<Record<R>>,
    backward_done: Cell<bool>,
}

pub(crate) struct Record<R: Real> {
    pub op: Op<R>,
    pub parents: Vec<Tensor<R>>,
}

/// An n-dimensional float array with optional autodiff tracking.
///
/// Cheap to clone: a handle onto a shared node.
#[derive(Clone)]
pub struct Tensor<R: Real>(pub(crate) Rc<Node<R>>);

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Tensor<R> {
    pub(crate) fn make(data: Vec<R>, shape: Vec<usize>, requires_grad: bool, record: Option<Record<R>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = requires_grad
            || record
                .as_ref()
                .map_or(false, |r| r.parents.iter().any(|p| p.0.track));
        // Parents of untracked tensors are never revisited; drop the record
        // so frozen forwards hold no graph.
        let record = if track { record } else { None };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            track,
            record,
            backward_done: Cell::new(false),
        }))
    }

    /// Constant (non-trainable) tensor from raw data.
    pub fn from_vec(data: Vec<R>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf parameter.
    pub fn param(data: Vec<R>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::make(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(vec![R::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: R) -> Self {
        Self::make(vec![value], vec![1], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the tensor's data.
    pub fn to_vec(&self) -> Vec<R> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> R {
        self.0.data.borrow()[0]
    }

    /// Run `f` over the tensor's data without copying.
    pub fn with_data<T>(&self, f: impl FnOnce(&[R]) -> T) -> T {
        f(&self.0.data.borrow())
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<R>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's data in place (optimizer updates).
    pub fn set_data(&self, data: Vec<R>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::Invalid {
                op: "set_data",
                msg: format!("expected {} elements, got {}", self.numel(), data.len()),
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Apply `f` to the mutable data buffer (optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [R])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.to_vec(), self.0.shape.clone(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, g: &[R]) {
        let mut slot = self.0.grad.borrow_mut();
        match &mut *slot {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode backprop from a scalar loss. Populates `grad` on every
    /// reachable `requires_grad` leaf (accumulating across calls on fresh
    /// graphs). Calling it twice on the same tensor is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.0.shape.clone(),
            });
        }
        if self.0.backward_done.get() {
            return Err(TensorError::RepeatedBackward);
        }
        self.0.backward_done.set(true);

        // Collect the tracked subgraph. Node ids increase with creation
        // order, so sorting by id descending is a reverse topological order.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<R>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.0.track || !seen.insert(t.0.id) {
                continue;
            }
            if let Some(rec) = &t.0.record {
                for p in &rec.parents {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate_grad(&[R::one()]);
        for node in &nodes {
            let grad = {
                let slot = node.0.grad.borrow();
                match &*slot {
                    Some(g) => g.clone(),
                    None => continue, // no downstream contribution
                }
            };
            if let Some(rec) = &node.0.record {
                ops::backward_op(rec, node, &grad);
                // Intermediate grads are only needed once.
                if !node.0.requires_grad {
                    *node.0.grad.borrow_mut() = None;
                }
            }
        }
        Ok(())
    }
}

/// Relative error between an analytic and a reference value, with a floor
/// so finite-difference noise near zero does not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
