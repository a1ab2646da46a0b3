//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is built define-by-run: every operation produces a new tensor
//! that records its parents and a backward closure. Node ids come from a
//! global counter, so creation order is a topological order and
//! [`Tensor::backward`] walks nodes in strict reverse creation order.
//!
//! Data buffers are immutable while a graph referencing them is alive; the
//! one sanctioned exception is [`Tensor::set_data`], which the optimizer uses
//! to update leaf parameters between steps.

mod ops;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

type SharedBuf<S> = Rc<RefCell<Vec<S>>>;
type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradMap<S>)>;

/// Lightweight handle used by backward closures to address a parent without
/// owning it (keeps the graph ownership in `parents` only, so dropping a
/// graph never recurses through closures).
#[derive(Clone, Copy)]
pub(crate) struct NodeRef {
    id: u64,
    len: usize,
    tracked: bool,
}

/// Gradient accumulator keyed by node id, used during a backward pass.
pub(crate) struct GradMap<S: Scalar> {
    grads: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> GradMap<S> {
    fn new() -> Self {
        GradMap { grads: HashMap::new() }
    }

    /// Accumulate a contribution into the gradient slot of `node`.
    /// Contributions to untracked nodes are dropped.
    pub(crate) fn accumulate(&mut self, node: NodeRef, contrib: &[S]) {
        if !node.tracked {
            return;
        }
        debug_assert_eq!(node.len, contrib.len());
        let slot = self
            .grads
            .entry(node.id)
            .or_insert_with(|| vec![S::zero(); node.len]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g = *g + *c;
        }
    }

    /// Run `f` against the gradient slot of `node` for in-place accumulation.
    pub(crate) fn with_slot(&mut self, node: NodeRef, f: impl FnOnce(&mut [S])) {
        if !node.tracked {
            return;
        }
        let slot = self
            .grads
            .entry(node.id)
            .or_insert_with(|| vec![S::zero(); node.len]);
        f(slot);
    }
}

struct TensorData<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: SharedBuf<S>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

impl<S: Scalar> Drop for TensorData<S> {
    fn drop(&mut self) {
        // Iterative teardown: long op chains (GRU over a sequence) would
        // otherwise recurse once per node.
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.inner) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

/// Dense n-dimensional array of scalars, optionally tracked in an autodiff
/// graph. Cloning is cheap (reference-counted handle).
pub struct Tensor<S: Scalar> {
    inner: Rc<TensorData<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_inner(
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward_fn: Option<BackwardFn<S>>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorData {
                id: fresh_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant tensor (not part of any gradient path).
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Self {
        Self::new_inner(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Constant tensor from f64 values, converted to `S`.
    pub fn from_f64_slice(vals: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(vals.iter().map(|&v| S::from_f64(v)).collect(), shape)
    }

    /// Trainable leaf tensor: participates in graphs and receives gradients.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Self {
        Self::new_inner(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![S::zero(); n], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![v; n], shape)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(vec![v], &[])
    }

    /// Result of an operation. Tracks gradients iff any parent does.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward_fn: BackwardFn<S>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.inner.requires_grad);
        if tracked {
            Self::new_inner(data, shape, true, parents, Some(backward_fn))
        } else {
            Self::new_inner(data, shape, false, Vec::new(), None)
        }
    }

    /// Like `from_op` but sharing the data buffer of an existing tensor
    /// (used by reshape, which is a pure metadata change).
    pub(crate) fn view_op(
        buf: SharedBuf<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward_fn: BackwardFn<S>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.inner.requires_grad);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, buf.borrow().len());
        Tensor {
            inner: Rc::new(TensorData {
                id: fresh_id(),
                shape,
                data: buf,
                grad: RefCell::new(None),
                requires_grad: tracked,
                parents: if tracked { parents } else { Vec::new() },
                backward_fn: if tracked { Some(backward_fn) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
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

    /// A leaf is a tracked tensor with no producing operation.
    pub fn is_leaf(&self) -> bool {
        self.inner.requires_grad && self.inner.backward_fn.is_none()
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    /// Clone the values out as a plain vector.
    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub(crate) fn buf(&self) -> SharedBuf<S> {
        Rc::clone(&self.inner.data)
    }

    pub(crate) fn node_ref(&self) -> NodeRef {
        NodeRef { id: self.inner.id, len: self.numel(), tracked: self.inner.requires_grad }
    }

    /// Overwrite the value buffer in place. Only valid for leaves between
    /// training steps; any live graph referencing this tensor would become
    /// inconsistent.
    pub fn set_data(&self, data: Vec<S>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_leaf_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values, no gradient path through the result.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            inner: Rc::new(TensorData {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Numeric-fault barrier: panics if the buffer holds NaN or Inf.
    pub fn assert_finite(&self, what: &str) {
        if !self.all_finite() {
            panic!("non-finite values in {what} (shape {:?})", self.shape());
        }
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate additively
    /// into every reachable leaf; call [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        assert!(self.requires_grad(), "backward on a tensor with no gradient path");

        // Collect reachable tracked nodes; creation ids give topological order.
        let mut nodes: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut gm = GradMap::new();
        gm.grads.insert(self.id(), vec![S::one()]);
        for node in &nodes {
            let Some(g) = gm.grads.remove(&node.id()) else { continue };
            match &node.inner.backward_fn {
                Some(f) => f(&g, &mut gm),
                None => node.accumulate_leaf_grad(&g),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]);
        let loss = x.sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0], &[2]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![5.0], &[1]);
        let loss = x.mul_scalar(3.0).sum_all();
        loss.backward();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_on_non_scalar_panics() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let y = x.mul_scalar(2.0);
        y.backward();
    }

    #[test]
    fn detach_keeps_values_kills_gradient() {
        let x = Tensor::<f64>::param(vec![1.5, -0.5], &[2]);
        let d = x.detach();
        assert_eq!(d.to_vec(), x.to_vec());
        assert!(!d.requires_grad());

        // grad through (x - detach(x)) equals grad through x
        let y = x.sub(&x.detach()).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn straight_through_composite() {
        // a_hard + p - detach(p): forward equals a_hard, backward equals dp.
        let p = Tensor::<f64>::param(vec![0.9, 0.2], &[2]);
        let hard = Tensor::from_vec(vec![1.0, 0.0], &[2]);
        let st = hard.add(&p.sub(&p.detach()));
        assert_eq!(st.to_vec(), vec![1.0, 0.0]);
        st.sum_all().backward();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f32>::from_vec(vec![3.0, 4.0], &[2]);
        let c = a.add(&b);
        assert!(!c.requires_grad());
        assert!(c.inner.parents.is_empty());
    }

    #[test]
    fn deep_graph_drop_does_not_overflow() {
        let x = Tensor::<f32>::param(vec![1.0], &[1]);
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1.0);
        }
        drop(y);
    }

    #[test]
    fn assert_finite_barrier() {
        let x = Tensor::<f32>::from_vec(vec![1.0, f32::NAN], &[2]);
        assert!(!x.all_finite());
        let ok = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]);
        ok.assert_finite("ok");
    }
}
