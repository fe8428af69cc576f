//! Reverse-mode autodiff over dense f64 tensors.
//!
//! Define-by-run: every primitive that touches a grad-requiring input records
//! a backward node; `Tensor::backward` walks the recorded graph once in
//! reverse topological order. The graph lives only as long as its output
//! tensors, so each forward pass builds a fresh graph.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Gradient accumulator used during a single backward sweep.
///
/// Keeps per-tensor scratch buffers keyed by node identity so that repeated
/// `backward` calls never double-count through interior nodes: only the final
/// per-tensor totals are added into the persistent `grad` buffers.
pub(crate) struct GradSink {
    slots: HashMap<*const Inner, Vec<f64>>,
}

impl GradSink {
    fn new() -> Self {
        GradSink {
            slots: HashMap::new(),
        }
    }

    /// Scratch gradient buffer for `t`, or `None` when `t` does not require grad.
    pub(crate) fn slot(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.requires_grad() {
            return None;
        }
        let key = Rc::as_ptr(&t.inner);
        let n = t.numel();
        Some(
            self.slots
                .entry(key)
                .or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.slots.remove(&Rc::as_ptr(&t.inner))
    }

    fn seed(&mut self, t: &Tensor, value: Vec<f64>) {
        self.slots.insert(Rc::as_ptr(&t.inner), value);
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

/// One recorded operation: enough to replay its vector-Jacobian product.
pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Dense n-dimensional array of f64 with an optional backward node.
///
/// Cloning is cheap (shared buffer); two clones are the *same* tensor for
/// gradient purposes. Not `Send`: one training run owns one graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.op))
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Leaf tensor from raw parts.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Invalid {
                op: "from_vec",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    shape.iter().product::<usize>(),
                    data.len()
                ),
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, None))
    }

    /// Grad-requiring leaf (a parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                requires_grad: true,
                grad: RefCell::new(None),
                node: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Some(Node {
                op,
                parents,
                backward,
            })
        } else {
            None
        };
        Tensor::new_inner(shape, data, requires_grad, node)
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

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the value buffer (used by the optimizer and by finite
    /// differences). Length must match.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// In-place update of the value buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Same underlying buffer (clone identity).
    pub fn ptr_eq(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    /// Leaf copy of the current values; no graph history, no grad.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    pub(crate) fn borrow_data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients are accumulated additively into every grad-requiring tensor
    /// reachable from `self`; calling twice without zeroing doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let order = self.topo_order();
        let mut sink = GradSink::new();
        sink.seed(self, vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = sink.take(t) else { continue };
            if t.requires_grad() {
                let mut slot = t.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(node) = &t.inner.node {
                (node.backward)(&g, &mut sink);
            }
        }
        Ok(())
    }

    /// Post-order (inputs before outputs) list of distinct tensors reachable
    /// through backward nodes.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        // Iterative DFS; stack holds (tensor, children_done).
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, done)) = stack.pop() {
            let key = Rc::as_ptr(&t.inner);
            if done {
                order.push(t);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if !seen.contains(&Rc::as_ptr(&p.inner)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Fails with [`Error::NonFinite`] when any element is NaN or infinite.
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn square_gradient() {
        // loss = x*x at x=3 -> grad 6
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn shared_subexpression_counts_once_per_path() {
        // loss = (x + x) * x = 2x^2, d/dx = 4x
        let x = Tensor::param(&[1], vec![5.0]).unwrap();
        let s = x.add(&x).unwrap();
        let loss = s.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![20.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad of (a*f + b*g) == a*grad(f) + b*grad(g)
        let point = vec![0.3, -1.2, 2.0];
        let run = |a: f64, b: f64| -> Vec<f64> {
            let x = Tensor::param(&[3], point.clone()).unwrap();
            let f = x.mul(&x).unwrap().sum().unwrap();
            let g = x.relu().unwrap().sum().unwrap();
            let loss = f.scale(a).unwrap().add(&g.scale(b).unwrap()).unwrap();
            loss.backward().unwrap();
            x.grad().unwrap()
        };
        let gf = run(1.0, 0.0);
        let gg = run(0.0, 1.0);
        let combined = run(2.5, -0.5);
        for i in 0..3 {
            let expect = 2.5 * gf[i] - 0.5 * gg[i];
            assert!((combined[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let d = x.mul(&x).unwrap().detach();
        assert!(!d.requires_grad());
    }
}
