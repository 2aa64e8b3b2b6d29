//! Dense n-dimensional float tensors with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles onto an immutable value plus an optional
//! graph node recording the producing operation and its inputs. Calling
//! [`TensorBase::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every `requires_grad` tensor it reaches.
//! Leaves (tensors with no producing node) terminate propagation.
//!
//! The whole engine is generic over the element type: `f32` is the working
//! precision for training and inference, `f64` backs the finite-difference
//! gradient-check harness where 32-bit central differences would be noise.
//!
//! Graph lifetime follows ownership: dropping the loss tensor after `backward`
//! releases every interior node, so a training step is build -> backward ->
//! step -> drop.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

pub mod kernels;
pub mod ops;

pub use ops::{
    add, affine, batchnorm2d, bce_op, combine_terms, concat_channels, conv2d, conv_transpose2d,
    maxpool2d, mean_all, relu, scale_mul, sigmoid, slice_channels, soft_jaccard_op,
    spatial_dropout, BnStats,
};

/// Scalar element type the engine is instantiated with.
pub trait Element: num_traits::Float + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Errors from tensor construction and operator application.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// A shape extent is zero.
    EmptyShape,
    /// Two operands cannot be combined.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operand does not have the rank/extent an operation requires.
    Dimension { op: &'static str, message: String },
    /// A hyperparameter (stride, kernel, probability, ...) is out of range.
    InvalidConfig { op: &'static str, message: String },
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { numel: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::EmptyShape => write!(f, "shape extents must all be positive"),
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::Dimension { op, message } => write!(f, "{op}: {message}"),
            TensorError::InvalidConfig { op, message } => write!(f, "{op}: {message}"),
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
        }
    }
}

impl std::error::Error for TensorError {}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Inside the closure no operation records a node, so intermediate buffers are
/// freed as soon as they go out of scope. Used for eval-mode forward passes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node<T: Element> {
    pub(crate) op: ops::Op<T>,
    pub(crate) inputs: Vec<TensorBase<T>>,
}

pub(crate) struct Inner<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// An n-dimensional array of `T` in row-major order, optionally tracked in the
/// computation graph. Cloning is cheap (shared handle).
pub struct TensorBase<T: Element> {
    inner: Rc<Inner<T>>,
}

/// The working-precision tensor used by the model, losses and trainer.
pub type Tensor = TensorBase<f32>;

impl<T: Element> Clone for TensorBase<T> {
    fn clone(&self) -> Self {
        TensorBase {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for TensorBase<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.inner.node.is_none())
            .finish()
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<(), TensorError> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::EmptyShape);
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(TensorError::DataLength {
            expected: numel,
            got: data_len,
        });
    }
    Ok(())
}

impl<T: Element> TensorBase<T> {
    fn new(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        TensorBase {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// A leaf tensor that does not require gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape(data.len(), shape)?;
        Ok(Self::new(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor that accumulates gradients during `backward` (a parameter).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape(data.len(), shape)?;
        Ok(Self::new(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![T::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![v; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], vec![1], false, None)
    }

    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, node: Node<T>) -> Self {
        // Record the node only when some input is on a gradient path and
        // recording is enabled; otherwise the result is a detached value and
        // upstream buffers can be freed eagerly.
        let track = grad_enabled() && node.inputs.iter().any(|t| t.inner.requires_grad);
        if track {
            Self::new(data, shape, true, Some(node))
        } else {
            Self::new(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when the tensor has no producing node.
    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutates the data of a leaf in place (optimizer updates). Must not be
    /// called while a graph referencing this tensor is being executed.
    pub fn apply_update(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    /// Copies data into a fresh leaf of another precision, keeping `requires_grad`.
    pub fn cast<U: Element>(&self) -> TensorBase<U> {
        let data: Vec<U> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&v| U::from_f64(v.to_f64()))
            .collect();
        TensorBase::new(data, self.inner.shape.clone(), self.inner.requires_grad, None)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const u8 as usize
    }

    /// Reverse-mode gradient computation from a scalar loss.
    ///
    /// Every `requires_grad` tensor reachable through the graph receives
    /// `d loss / d tensor`, accumulating additively across fan-out and across
    /// repeated `backward` calls (callers zero grads between steps).
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: self.numel() });
        }
        if !self.inner.requires_grad {
            // Nothing on the graph requires gradients; vacuously done.
            return Ok(());
        }

        // Iterative post-order DFS; the reversed order visits consumers before
        // producers, so each node's output gradient is complete when used.
        let mut order: Vec<TensorBase<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(TensorBase<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr_key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.inner.requires_grad {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let grad = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            ops::backprop(node, t, &grad);
        }
        Ok(())
    }
}
