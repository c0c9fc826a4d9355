//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation executed on tensors that
//! participate in gradient flow. [`Tape::backward`] replays the record in
//! reverse, accumulating gradients additively into every `requires_grad`
//! leaf reachable from the loss. Execution is single-threaded per tape;
//! matrix kernels may split output rows across threads (see
//! [`linalg::set_threads`]) without changing any per-element summation
//! order, so results are bitwise deterministic for a fixed seed.

pub mod format;
pub mod gradcheck;
pub mod linalg;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

pub(crate) struct OpNode {
    pub(crate) backward: BackwardFn,
}

/// Gradient accumulator indexed by tape node id.
///
/// Intermediate slots are dropped as soon as their node has been
/// processed; leaf slots survive the sweep.
pub struct GradSink {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradSink {
    fn new(n: usize) -> Self {
        GradSink {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    /// Returns the gradient buffer for `id`, allocating zeros on first use.
    pub(crate) fn accum(&mut self, id: usize, len: usize) -> &mut [f64] {
        let slot = &mut self.slots[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.slots[id].take()
    }
}

pub(crate) struct TapeInner {
    pub(crate) vals: Vec<Rc<Vec<f64>>>,
    pub(crate) shapes: Vec<Vec<usize>>,
    nodes: Vec<Option<OpNode>>,
    pub(crate) requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

/// The computation record shared by all tensors created on it.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules (training mode).
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                vals: Vec::new(),
                shapes: Vec::new(),
                nodes: Vec::new(),
                requires: Vec::new(),
                grads: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// A tape that only evaluates forward values (inference mode).
    pub fn eval() -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn check_new(vals: &[f64], shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != vals.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel, vals.len()),
            ));
        }
        Ok(())
    }

    pub(crate) fn push(
        &self,
        vals: Vec<f64>,
        shape: Vec<usize>,
        requires: bool,
        node: Option<OpNode>,
    ) -> Tensor {
        self.push_shared(Rc::new(vals), shape, requires, node)
    }

    pub(crate) fn push_shared(
        &self,
        vals: Rc<Vec<f64>>,
        shape: Vec<usize>,
        requires: bool,
        node: Option<OpNode>,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.vals.len();
        inner.vals.push(vals);
        inner.shapes.push(shape.clone());
        inner.nodes.push(node);
        inner.requires.push(requires);
        inner.grads.push(None);
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// A differentiable leaf (model parameter) when the tape records
    /// gradients; a plain value otherwise.
    pub fn leaf(&self, vals: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_new(&vals, shape)?;
        let requires = self.grad_enabled();
        Ok(self.push(vals, shape.to_vec(), requires, None))
    }

    /// A value that never receives gradients.
    pub fn constant(&self, vals: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_new(&vals, shape)?;
        Ok(self.push(vals, shape.to_vec(), false, None))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![v], vec![1], false, None)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` for every
    /// `requires_grad` leaf reachable from `loss`; gradients from multiple
    /// uses of the same tensor accumulate additively.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::shape("backward", "loss lives on a different tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.iter().all(|n| n.is_none()) {
            return Err(Error::Numeric(
                "backward: computation record is empty".into(),
            ));
        }
        let n = inner.vals.len();
        let mut sink = GradSink::new(n);
        sink.accum(loss.id, 1)[0] = 1.0;
        for id in (0..=loss.id).rev() {
            if !inner.requires[id] {
                continue;
            }
            match &inner.nodes[id] {
                None => continue, // leaf: keep its slot
                Some(node) => {
                    let Some(dy) = sink.take(id) else { continue };
                    (node.backward)(&dy, &mut sink);
                }
            }
        }
        for id in 0..n {
            if inner.requires[id] && inner.nodes[id].is_none() {
                if let Some(g) = sink.take(id) {
                    inner.grads[id] = Some(g);
                }
            }
        }
        Ok(())
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Zero-copy handle to the underlying values.
    pub fn data(&self) -> Rc<Vec<f64>> {
        self.tape.inner.borrow().vals[self.id].clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().as_ref().clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires[self.id]
    }

    /// Gradient populated by the last [`Tape::backward`] sweep, if this
    /// tensor is a leaf that was reached.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data~{:?})",
            self.shape,
            self.requires_grad(),
            preview
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn leaf_shape_validation() {
        let t = Tape::new();
        assert!(t.leaf(vec![1.0, 2.0], &[3]).is_err());
        assert!(t.leaf(vec![1.0, 2.0], &[2, 0]).is_err());
        assert!(t.leaf(vec![1.0, 2.0], &[2]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = ops::sum_all(&x).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        // loss = sum(x*x), grad = 2x
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&sq).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x + x  =>  dy/dx = 2, the sum of both single-use gradients
        let t = Tape::new();
        let x = t.leaf(vec![5.0], &[1]).unwrap();
        let y = ops::add(&x, &x).unwrap();
        let loss = ops::sum_all(&y).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::relu(&x).unwrap();
        assert!(t.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_empty_record() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0], &[1]).unwrap();
        assert!(t.backward(&x).is_err());
    }

    #[test]
    fn eval_tape_skips_tracking() {
        let t = Tape::eval();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::sigmoid(&x).unwrap();
        assert!(!y.requires_grad());
    }
}
