//! Minimal reverse-mode differentiation over dense f64 arrays.
//!
//! Tensors form a dynamically built acyclic graph; [`Tensor::backward`]
//! accumulates gradients in reverse topological order and then frees the
//! graph (no higher-order derivatives). Everything is double precision and
//! single-threaded per graph.

mod checkpoint;
mod fdcheck;
mod ops;
mod optim;

pub use checkpoint::{load_arrays, save_arrays, ArrayMap, CHECKPOINT_VERSION};
pub use fdcheck::{finite_diff_check, finite_diff_check_multi, FdReport};
pub use ops::linear;
pub use optim::{
    adamw_step, clip_grad_norm, cosine_lr, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Node {
    parents: Vec<Tensor>,
    backward: Box<dyn Fn(&[f64])>,
}

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense multi-dimensional array participating in a differentiation graph.
/// Cloning is shallow (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self::raw(shape, values, false, None))
    }

    /// A leaf that participates in gradient accumulation. Values must be
    /// finite.
    pub fn leaf(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("leaf tensor value {}", v)));
        }
        Ok(Self::raw(shape, values, true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![v], false, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::raw(shape, vec![0.0; n], false, None)
    }

    fn raw(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                grad: None,
                requires_grad,
                node,
            })),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Some(Node {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Self::raw(shape, values, requires_grad, node)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggles gradient tracking on a leaf (used to freeze parameters for
    /// inference).
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Scalar value; errors when the tensor is not a single element.
    pub fn item(&self) -> Result<f64> {
        let d = self.inner.borrow();
        if d.values.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                lhs: d.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(d.values[0])
    }

    /// Overwrites the stored values (leaf update between optimizer steps).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut d = self.inner.borrow_mut();
        if d.values.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                lhs: d.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        d.values.copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, update: &[f64]) {
        let mut d = self.inner.borrow_mut();
        let n = d.values.len();
        let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, u) in grad.iter_mut().zip(update) {
            *g += u;
        }
    }

    fn ptr(&self) -> *const RefCell<TensorData> {
        Rc::as_ptr(&self.inner)
    }

    /// Reverse-mode gradient accumulation from a scalar loss. Leaves with
    /// `requires_grad` receive gradients; the graph is freed afterwards.
    pub fn backward(&self) -> Result<()> {
        {
            let d = self.inner.borrow();
            if d.values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    lhs: d.shape.clone(),
                    rhs: vec![1],
                });
            }
            if !d.values[0].is_finite() {
                return Err(Error::NonFinite(format!("loss value {}", d.values[0])));
            }
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order topological sort over Rc identity.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            let parents: Vec<Tensor> = {
                let d = t.inner.borrow();
                d.node
                    .as_ref()
                    .map(|n| n.parents.clone())
                    .unwrap_or_default()
            };
            stack.push((t.clone(), true));
            for p in parents {
                if p.requires_grad() && !visited.contains(&p.ptr()) {
                    stack.push((p, false));
                }
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let grad = { t.inner.borrow().grad.clone() };
            let node = { t.inner.borrow_mut().node.take() };
            if let (Some(grad), Some(node)) = (grad, node) {
                (node.backward)(&grad);
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            d.shape, d.requires_grad
        )
    }
}
