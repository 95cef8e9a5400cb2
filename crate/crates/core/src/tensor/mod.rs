//! Dense 64-bit float tensors with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles to immutable-shaped buffers. Every
//! differentiable operation records its parents and a backward rule; calling
//! [`backprop`] on a scalar output walks the recorded graph in reverse
//! topological order and accumulates gradients into the grad slots of all
//! reachable leaves marked with `requires_grad`.

mod conv;
mod gradcheck;
mod ops;

pub use conv::{ConvSpec, CELL_STRIDE_LAYERS};
pub use gradcheck::{finite_difference_gradient, max_relative_error, GradCheckOutcome};
pub use ops::{
    add, conv3d, leaky_relu, scale, select_frames, smooth_l1, smooth_l1_deriv, softmax, sum,
    transposed_conv3d,
};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True unless inside a [`no_grad`] scope.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording until the guard drops. Forward passes inside the
/// scope allocate no backward state and free intermediates eagerly.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Backward rule: given upstream gradient and this node's output data,
/// produce gradients for each parent (None for parents that need none).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense row-major tensor of f64 with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, tracked={})",
            self.node.id,
            self.node.shape,
            self.is_tracked()
        )
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape, vec![0.0; numel], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape, vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op"
        );
        let record = grad_enabled() && parents.iter().any(Tensor::is_tracked);
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: if record { parents } else { Vec::new() },
                backward: if record { Some(backward) } else { None },
            }),
        }
    }

    /// Marks a leaf as a differentiation target. Only leaves can be marked.
    pub fn requires_grad(self, yes: bool) -> Tensor {
        assert!(
            self.node.backward.is_none(),
            "requires_grad can only be set on leaf tensors"
        );
        // Rc is fresh at leaf construction sites, but clone defensively.
        match Rc::try_unwrap(self.node) {
            Ok(mut node) => {
                node.requires_grad = yes;
                Tensor { node: Rc::new(node) }
            }
            Err(rc) => Tensor {
                node: Rc::new(Node {
                    id: fresh_id(),
                    shape: rc.shape.clone(),
                    data: RefCell::new(rc.data.borrow().clone()),
                    grad: RefCell::new(None),
                    requires_grad: yes,
                    parents: Vec::new(),
                    backward: None,
                }),
            },
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Overwrites the buffer in place (optimizer updates, finite differences).
    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.node.data.borrow_mut();
        assert_eq!(data.len(), values.len());
        data.copy_from_slice(values);
    }

    pub fn is_tracked(&self) -> bool {
        self.node.requires_grad || self.node.backward.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Adds into the grad slot, initializing it at zero when absent.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Reverse-mode gradient propagation from a scalar root.
///
/// Gradients accumulate into the grad slots of reachable `requires_grad`
/// leaves; repeated calls without [`Tensor::zero_grad`] keep accumulating.
pub fn backprop(root: &Tensor) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::invalid(format!(
            "backprop root must be scalar, got shape {:?}",
            root.shape()
        )));
    }
    let order = topo_order(root)?;
    let mut flows: HashMap<u64, Vec<f64>> = HashMap::new();
    flows.insert(root.id(), vec![1.0]);
    // `order` is reverse-topological: root first, leaves last.
    for t in &order {
        let Some(up) = flows.remove(&t.id()) else {
            continue;
        };
        if t.node.requires_grad {
            t.accumulate_grad(&up);
        }
        if let Some(back) = &t.node.backward {
            let out_data = t.node.data.borrow();
            let parent_grads = back(&up, &out_data, &t.node.parents);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.len(), parent.numel());
                match flows.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&pg) {
                            *a += d;
                        }
                    }
                    None => {
                        flows.insert(parent.id(), pg);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Reverse-topological order (root first). Rejects cycles, which cannot be
/// constructed through the public API but are part of the contract.
fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Open,
        Done,
    }
    let mut states: HashMap<u64, State> = HashMap::new();
    let mut post: Vec<Tensor> = Vec::new();
    // Iterative DFS: (node, next child index).
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    states.insert(root.id(), State::Open);
    while let Some((node, child_idx)) = stack.pop() {
        if child_idx < node.node.parents.len() {
            let child = node.node.parents[child_idx].clone();
            stack.push((node, child_idx + 1));
            match states.get(&child.id()) {
                None => {
                    states.insert(child.id(), State::Open);
                    stack.push((child, 0));
                }
                Some(State::Open) => {
                    return Err(Error::invalid("cycle detected in recorded graph"));
                }
                Some(State::Done) => {}
            }
        } else {
            states.insert(node.id(), State::Done);
            post.push(node);
        }
    }
    post.reverse();
    Ok(post)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backprop_rejects_non_scalar_root() {
        let x = Tensor::zeros(vec![2, 2]);
        assert!(backprop(&x).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .requires_grad(true);
        let loss = sum(&x);
        backprop(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backprop_accumulates() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad(true);
        let loss = sum(&x);
        backprop(&loss).unwrap();
        backprop(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad(true);
        let _guard = no_grad();
        let y = sum(&x);
        assert!(!y.is_tracked());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x + x) -> grad = 2 everywhere
        let x = Tensor::from_vec(vec![2], vec![3.0, -1.0])
            .unwrap()
            .requires_grad(true);
        let y = add(&x, &x).unwrap();
        let loss = sum(&y);
        backprop(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
