//! Minimal reverse-mode automatic differentiation over `ndarray` buffers.
//!
//! Every [`Tensor`] is a handle to a node in an implicit DAG. Operations
//! record a backward closure; [`Tensor::backward`] runs the tape in reverse
//! topological order and accumulates gradients into the leaves that were
//! created with [`Tensor::param`]. All math is `f64`.
//!
//! Inside a [`no_grad`] scope (or when no input requires gradients) ops
//! produce plain constant nodes, so evaluation does not grow a tape.

mod ops;
pub mod check;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Node buffers are kept in standard (row-major) layout so ops may slice
/// and reshape freely.
fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.shape().to_vec();
        ArrayD::from_shape_vec(shape, a.iter().cloned().collect()).expect("element count")
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    /// A leaf that does not participate in gradient accumulation.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(to_standard(data)),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            }),
        }
    }

    /// A trainable leaf: `backward` accumulates into its `grad` slot.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(to_standard(data)),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: true,
            }),
        }
    }

    /// Internal op constructor. Collapses to a constant when the tape is off
    /// or no parent needs gradients.
    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        if !grad_enabled() || !parents.iter().any(|p| p.node.requires_grad) {
            return Tensor::constant(data);
        }
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(to_standard(data)),
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                requires_grad: true,
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.data.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.data.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let d = self.node.data.borrow();
        debug_assert_eq!(d.len(), 1, "value() on non-scalar tensor");
        *d.iter().next().expect("non-empty")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Overwrite the stored value. Intended for leaves (optimizer updates,
    /// finite-difference probes); the new value must keep the shape.
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data must preserve shape");
        *d = data;
    }

    /// Apply an in-place update to the stored value.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(to_standard(g)),
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate into every
    /// reachable `param` leaf (existing gradients are added to, so call
    /// `zero_grad` between steps).
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward requires a scalar root");
        let order = self.topo_order();
        self.accumulate_grad(ArrayD::ones(IxDyn(self.node.data.borrow().shape())));
        for tensor in order.iter().rev() {
            let Some(backward) = tensor.node.backward.as_ref() else {
                continue;
            };
            let grad_out = match tensor.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), tensor.node.parents.len());
            for (parent, pg) in tensor.node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.node.requires_grad {
                        debug_assert_eq!(
                            pg.shape(),
                            parent.node.data.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        parent.accumulate_grad(pg);
                    }
                }
            }
            // Intermediate grads are no longer needed once consumed.
            if tensor.node.backward.is_some() {
                *tensor.node.grad.borrow_mut() = None;
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.node.id);
        while let Some((tensor, child_idx)) = stack.pop() {
            if child_idx < tensor.node.parents.len() {
                let parent = tensor.node.parents[child_idx].clone();
                stack.push((tensor, child_idx + 1));
                if parent.node.requires_grad && seen.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(tensor);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn scalar(v: f64) -> Tensor {
        Tensor::param(arr1(&[v]).into_dyn())
    }

    #[test]
    fn backward_through_shared_subexpression() {
        // f = (x * x) + (x * x); df/dx = 4x
        let x = scalar(3.0);
        let sq = x.mul(&x);
        let f = sq.add(&sq);
        f.backward();
        assert_eq!(f.value(), 18.0);
        assert_eq!(x.grad().unwrap()[[0]], 12.0);
    }

    #[test]
    fn no_grad_builds_constants() {
        let x = scalar(2.0);
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert_eq!(y.value(), 4.0);
    }

    #[test]
    fn grad_accumulates_until_cleared() {
        let x = scalar(1.5);
        for _ in 0..2 {
            let f = x.mul(&x);
            f.backward();
        }
        assert_eq!(x.grad().unwrap()[[0]], 6.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_receive_no_grad() {
        let x = scalar(2.0);
        let c = Tensor::constant(arr1(&[5.0]).into_dyn());
        let f = x.mul(&c);
        f.backward();
        assert_eq!(x.grad().unwrap()[[0]], 5.0);
        assert!(c.grad().is_none());
    }
}
