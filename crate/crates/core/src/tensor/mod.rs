//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once produced by an operation; the only sanctioned
//! mutations are gradient accumulation and optimizer updates on leaf
//! parameters. Each op output holds an `OpRecord` linking back to its inputs,
//! so `backward()` on a scalar loss walks the implied DAG in reverse
//! topological order. The graph is single-threaded by construction (`Rc`).

mod ops;
pub mod optim;
pub mod gradcheck;

pub use ops::mean_of;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: maps the upstream gradient to per-parent contributions.
/// Arguments are (upstream gradient, parents, op output); entries in the
/// returned vector align with `parents`, `None` meaning "no gradient".
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &Tensor) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct OpRecord {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<OpRecord>,
}

/// Handle to a tensor node. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

#[inline]
pub(crate) fn debug_check_finite(op: &str, data: &[f64]) {
    if cfg!(debug_assertions) {
        for (i, v) in data.iter().enumerate() {
            debug_assert!(
                v.is_finite(),
                "{op} produced non-finite value {v} at flat index {i}"
            );
        }
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<OpRecord>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Plain tensor without gradient tracking.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "shape {shape:?} (={expect} elements) does not match data length {}",
                data.len()
            )));
        }
        Ok(Self::build(shape, data, false, None))
    }

    /// Trainable leaf: participates in `backward()` and receives gradients.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                grad: RefCell::new(None),
                requires_grad: true,
                op: None,
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![0.0; n], false, None)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![1.0; n], false, None)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Standard-normal initialized parameter.
    pub fn randn(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Self::build(shape, data, false, None)
    }

    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Self::build(shape, data, false, None)
    }

    /// Truncated-normal (+/- 2 sigma) initialized parameter with the given std.
    pub fn trunc_normal_param(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.trunc_normal(std)).collect();
        Self::build(shape, data, true, None)
    }

    pub fn zeros_param(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![0.0; n], true, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(|p| p.tracked()) {
            Self::build(shape, data, false, Some(OpRecord { parents, backward }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    // ---- accessors -------------------------------------------------------

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True if this node participates in the autodiff graph.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, cut loose from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Replaces the stored values; only the optimizer and checkpoint loader
    /// may call this, and only on leaf tensors.
    pub(crate) fn set_data(&self, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.len());
        *self.inner.data.borrow_mut() = data;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    // ---- reverse-mode differentiation ------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients of every reachable
    /// `requires_grad` leaf are accumulated into its `grad` slot; repeated
    /// calls without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS: parents precede children in `topo`.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.op {
                for p in &op.parents {
                    if p.tracked() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(self.id(), vec![1.0]);

        for t in topo.iter().rev() {
            let Some(upstream) = flowing.remove(&t.id()) else {
                continue;
            };
            if t.inner.requires_grad {
                t.accumulate_grad(&upstream);
            }
            if let Some(op) = &t.inner.op {
                let contributions = (op.backward)(&upstream, &op.parents, t);
                debug_assert_eq!(contributions.len(), op.parents.len());
                for (parent, contribution) in op.parents.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !parent.tracked() {
                        continue;
                    }
                    debug_assert_eq!(c.len(), parent.len());
                    match flowing.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&c) {
                                *a += v;
                            }
                        }
                        None => {
                            flowing.insert(parent.id(), c);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let head: Vec<f64> = data.iter().take(6).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?}{})",
            self.inner.shape,
            self.inner.requires_grad,
            head.len(),
            head,
            if data.len() > 6 { ", ..." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shape() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "got: {msg}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![2], vec![1.0, 1.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        // loss = x*x + x  =>  d/dx = 2x + 1
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let d = x.mul_scalar(3.0).detach();
        let loss = d.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        // Only the direct path contributes: d acts as a constant (3, 6).
        assert_eq!(x.grad().unwrap(), vec![3.0, 6.0]);
    }
}
