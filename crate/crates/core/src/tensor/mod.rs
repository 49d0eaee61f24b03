//! Dense `f64` tensors with tape-style reverse-mode differentiation.
//!
//! Every operation that has at least one input with `requires_grad` set
//! records a backward closure together with its parent tensors. Calling
//! [`Tensor::backward`] on a scalar walks that record once in reverse
//! topological order and *adds* the resulting gradients into the `grad`
//! buffer of every participating tensor that requires a gradient. Gradients
//! accumulate across calls until [`Tensor::zero_grad`] is invoked.
//!
//! Tensor values are immutable once produced. Parameters are updated by
//! replacing the leaf tensor (see the optimizer), which also resets its
//! gradient buffer.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, numeric_gradient};
pub use ops::*;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{shape_err, Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Computes the gradient contribution for each parent from the output
/// gradient. The `needs` mask says which parents require a gradient;
/// entries for parents that do not may be `None`.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// A reference-counted node of the computation record.
///
/// Cloning is cheap and shares the node, including its gradient buffer.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: AtomicBool::new(requires_grad),
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Creates a constant tensor. Fails if `data` does not fill `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        if numel_of(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            ));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Creates a trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(value: f64, shape: &[usize]) -> Result<Self> {
        Self::new(vec![value; numel_of(shape)], shape)
    }

    /// A rank-0 constant.
    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    /// Output of a recorded operation. The backward closure is kept only if
    /// some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Self::build(data, shape, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(shape_err!("item() on tensor of shape {:?}", self.shape())),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    /// Toggles gradient tracking. Only meaningful on leaves; operations
    /// already recorded keep the setting they were built with.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.store(on, Ordering::Relaxed);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// A constant copy that shares no computation record.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// A copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode pass from this scalar. Populates `grad` on every tensor
    /// in the record that requires a gradient; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::with_capacity(order.len());
        pending.insert(self.0.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(grad_fn) = &node.0.grad_fn {
                let needs: Vec<bool> = grad_fn.parents.iter().map(Tensor::requires_grad).collect();
                let contributions = (grad_fn.backward)(&g, &needs);
                debug_assert_eq!(contributions.len(), grad_fn.parents.len());
                for ((parent, contrib), need) in grad_fn.parents.iter().zip(contributions).zip(&needs) {
                    let (Some(contrib), true) = (contrib, *need) else {
                        continue;
                    };
                    debug_assert_eq!(contrib.len(), parent.numel());
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        None => {
                            pending.insert(parent.0.id, contrib);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require a gradient; each node once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(grad_fn) = &node.0.grad_fn {
                for parent in grad_fn.parents.iter().rev() {
                    if parent.requires_grad() && !visited.contains(&parent.0.id) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(matches!(Tensor::new(vec![1.0; 5], &[2, 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0], &[2, 3]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_zero_times_x_is_zero() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        sum(&scale(&x, 0.0)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x * x is reused twice: d/dx (2 * sum(x^2)) = 4x
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = mul(&x, &x).unwrap();
        let loss = sum(&add(&y, &y).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        assert_eq!(y.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn constants_record_nothing() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = scale(&a, 3.0);
        assert!(!b.requires_grad());
        assert!(b.is_leaf());
        b.detach();
        sum(&b).backward().unwrap();
        assert!(a.grad().is_none());
    }
}
