//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap, clonable handle to an immutable node. Operations
//! on tensors that require gradients record a backward closure and their
//! parents, so the graph is built implicitly during the forward pass. Calling
//! [`Tensor::backward`] on a scalar linearises the graph into a [`Tape`]
//! (reverse topological order) and propagates gradients into every leaf that
//! requires them. Leaf gradients accumulate until [`Tensor::zero_grad`].

mod io;
mod nn;
mod ops;
pub mod special;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use io::{read_tns, read_tns_from, write_tns, write_tns_to, TNS_MAGIC};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    /// Builds a constant tensor. Fails if the data length does not match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Builds a leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    /// Result of an operation. Records the backward closure only when some
    /// parent requires gradients and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: track,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same values as a fresh gradient-accumulating leaf.
    pub fn detach_param(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Operation that produced this tensor, or `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn into_data(self) -> Vec<f64> {
        match Arc::try_unwrap(self.0) {
            Ok(node) => node.data,
            Err(shared) => shared.data.clone(),
        }
    }

    /// Propagates gradients from this scalar into every reachable leaf that
    /// requires them. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        Tape::record(self).run(self, vec![1.0]);
        Ok(())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {len}")));
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

/// Nodes reachable from a root, ordered so every node precedes its parents.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    /// Linearises the graph behind `root` (iterative DFS, each node once).
    pub fn record(root: &Tensor) -> Tape {
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut post: Vec<Tensor> = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                post.push(node);
                continue;
            }
            if visited.insert(node.0.id, ()).is_some() {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains_key(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        post.reverse();
        Tape { order: post }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Operation names in backward visiting order; leaves appear as "leaf".
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order.iter().map(|t| t.op_name().unwrap_or("leaf")).collect()
    }

    fn run(&self, root: &Tensor, seed: Vec<f64>) {
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(root.0.id, seed);
        for node in &self.order {
            let Some(g) = grads.remove(&node.0.id) else { continue };
            match &node.0.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", gf.name);
                        match grads.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }
}
