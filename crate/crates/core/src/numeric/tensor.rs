//! Dense float64 tensors with tape-free reverse-mode autodiff.
//!
//! Every op allocates a fresh node holding its output plus a closure that
//! maps the output gradient back onto the inputs. `backward` walks the graph
//! in reverse topological order from a scalar loss. Nodes are reference
//! counted, so dropping the loss releases the whole graph; parameters are
//! plain leaf nodes and survive.
//!
//! Storage is row-major and contiguous. Shape-changing ops copy; there are
//! no strided views.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Signature of a node's gradient rule: (grad of output, output data, parents).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: &'static str,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) requires_grad: Cell<bool>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

fn next_id() -> u64 {
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Dense n-dimensional float64 array, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("op", &self.inner.op)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    /// Standard-normal samples drawn from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: next_id(),
                op: "leaf",
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Builds an op node. Gradient tracking is dropped when no parent needs it.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: bad output shape");
        #[cfg(debug_assertions)]
        {
            if let Some(v) = data.iter().find(|v| !v.is_finite()) {
                panic!("op `{op}` produced non-finite value {v}");
            }
        }
        let track = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Node {
                id: next_id(),
                op,
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(track),
                grad: RefCell::new(None),
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as a trainable parameter (or detaches it again).
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; errors unless numel == 1.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrites the stored values in place (optimizer updates).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Applies `f` to the stored values in place without recording a graph node.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Fresh leaf with the same data and no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.shape().to_vec(), false)
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires them; call `zero_grad` between steps.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(format!(
            "backward() needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::state(
            "backward() on a tensor with no gradient-tracked inputs".to_string(),
        ));
    }

    // Iterative post-order DFS; reversal gives a valid topological order.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.inner.id);
    while let Some((node, child)) = stack.pop() {
        let parents = &node.inner.parents;
        if child < parents.len() {
            stack.push((node.clone(), child + 1));
            let p = parents[child].clone();
            if p.requires_grad() && visited.insert(p.inner.id) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    // Interior (op) grads are scratch for this sweep; only leaf grads
    // accumulate across repeated backward calls.
    for node in order.iter() {
        if node.inner.backward.is_some() {
            node.zero_grad();
        }
    }
    loss.accumulate_grad(&[1.0]);
    for node in order.iter().rev() {
        if let Some(back) = node.inner.backward.as_ref() {
            let grad = node.inner.grad.borrow().clone();
            if let Some(g) = grad {
                let data = node.inner.data.borrow().clone();
                back(&g, &data, &node.inner.parents);
            }
        }
    }
    Ok(())
}
