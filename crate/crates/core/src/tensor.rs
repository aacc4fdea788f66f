//! The graph-carrying tensor type and the reverse pass.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Computes one optional gradient per parent from the output gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    node: Option<Node<T>>,
}

/// Row-major n-dimensional array with optional gradient tracking.
///
/// Cloning is cheap and shares storage; values produced by an op are
/// never mutated afterwards, only leaf parameters are updated in place
/// by the optimizer.
pub struct Tensor<T: Real = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.inner.node.as_ref().map(|n| n.op))
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::dim(
            "tensor",
            "dimensions must be positive",
            shape,
            &[len],
        ));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(TensorError::dim(
            "tensor",
            format!("shape holds {numel} elements but data has {len}"),
            shape,
            &[len],
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    /// Builds a constant leaf. Fails on a shape/length mismatch or non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self::leaf(shape, data, false))
    }

    /// Builds a leaf that accumulates gradients.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::leaf(shape, vec![T::zero(); n], false)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                node: None,
            }),
        }
    }

    /// Wraps the result of a forward op, recording the backward closure
    /// only when some parent tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                node,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Used to freeze base weights.
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replaces leaf data in place; the optimizer's only write path.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::Contract(
                "only leaf tensors can be updated in place".into(),
            ));
        }
        let mut data = self.inner.data.borrow_mut();
        f(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "update" });
        }
        Ok(())
    }

    /// Edits the accumulated gradient in place, e.g. to mask frozen rows.
    pub fn update_grad(&self, f: impl FnOnce(&mut [T])) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }

    /// Copy of the values as a new constant leaf.
    pub fn detach(&self) -> Self {
        Self::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Copy into another element type, keeping the requires_grad flag.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|v| U::from_f64(v.as_f64()))
            .collect();
        Tensor::leaf(self.inner.shape.clone(), data, self.requires_grad())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> *const Inner<T> {
        Rc::as_ptr(&self.inner)
    }

    /// Reverse pass from a single-element tensor.
    ///
    /// Gradients accumulate into every reachable tensor that tracks them;
    /// callers reset them with [`Tensor::zero_grad`] or through the optimizer.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(node) = &t.inner.node {
                let parent_grads = (node.backward)(&g, &node.parents);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "gradient length from {}", node.op);
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            let mut slot = t.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-tracking subgraph.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
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
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::<f32>::new(vec![1], vec![f32::NAN]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "tensor" });
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn cast_keeps_flag() {
        let x = Tensor::<f32>::param(vec![2], vec![1.5, -2.0]).unwrap();
        let y: Tensor<f64> = x.cast();
        assert!(y.requires_grad());
        assert_eq!(y.to_vec(), vec![1.5, -2.0]);
    }
}
