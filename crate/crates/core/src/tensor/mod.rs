//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to an immutable node. Nodes created
//! by differentiable ops keep their inputs alive and carry a backward closure;
//! leaves created with [`Tensor::parameter`] accumulate gradients. Node ids come
//! from a global counter, so within one graph a parent always has a smaller id
//! than its children and sorting by descending id is a reverse topological
//! order.

mod conv;
pub mod io;
pub mod kernels;
mod ops;
pub mod rng;

pub use conv::conv2d;
pub use ops::concat_lastdim;
pub use rng::Rng;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::{Error, Real, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording autodiff lineage on this thread.
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

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// What a backward closure sees: the upstream gradient, the op's own output,
/// and its inputs in construction order.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [Real],
    pub out: &'a [Real],
    pub parents: &'a [Tensor],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> + Send + Sync>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<Real>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<Real>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> + Send + Sync + 'static,
    {
        if !grad_enabled() || !parents.iter().any(Tensor::requires_grad) {
            return Tensor::leaf(shape, data, false);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: true,
                grad: Mutex::new(None),
                parents,
                backward: Some(Box::new(backward)),
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<Real>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf: gradients accumulate into it on [`Tensor::backward`].
    pub fn parameter(data: Vec<Real>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: Real) -> Tensor {
        Tensor::leaf(Vec::new(), vec![value], false)
    }

    /// A fresh leaf with this tensor's shape and gradient flag but new values.
    pub fn with_data(&self, data: Vec<Real>) -> Result<Tensor> {
        check_shape(&data, &self.node.shape)?;
        Ok(Tensor::leaf(self.node.shape.clone(), data, self.node.requires_grad))
    }

    /// Same values, no lineage, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    /// Same values as a gradient-tracking leaf.
    pub fn requiring_grad(&self) -> Tensor {
        Tensor::leaf(self.node.shape.clone(), self.node.data.clone(), true)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Real> {
        match self.node.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.node.shape
            ))),
        }
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Accumulates d self / d leaf into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        self.ensure_scalar()?;
        propagate(self, |leaf, g| {
            let mut slot = leaf.node.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        });
        Ok(())
    }

    /// Gradients of this scalar with respect to `wrt` (gradient-tracking
    /// leaves), returned without touching any stored `grad` buffer. A leaf
    /// that does not influence the output gets zeros.
    pub fn gradients(&self, wrt: &[&Tensor]) -> Result<Vec<Vec<Real>>> {
        self.ensure_scalar()?;
        for t in wrt {
            if !t.requires_grad() || !t.is_leaf() {
                return Err(Error::Usage(
                    "gradients() targets must be gradient-tracking leaves".into(),
                ));
            }
        }
        let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
        let mut found: HashMap<u64, Vec<Real>> = HashMap::new();
        propagate(self, |leaf, g| {
            if wanted.contains(&leaf.id()) {
                found.insert(leaf.id(), g);
            }
        });
        Ok(wrt
            .iter()
            .map(|t| found.remove(&t.id()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    }

    fn ensure_scalar(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }
}

fn check_shape(data: &[Real], shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Input(format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Input(format!(
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        )));
    }
    Ok(())
}

/// Reverse sweep from `root`; `sink` receives the total gradient of each
/// gradient-tracking leaf exactly once.
fn propagate(root: &Tensor, mut sink: impl FnMut(&Tensor, Vec<Real>)) {
    if !root.requires_grad() {
        return;
    }
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![root.clone()];
    seen.insert(root.id());
    while let Some(t) = stack.pop() {
        for p in &t.node.parents {
            if p.requires_grad() && seen.insert(p.id()) {
                stack.push(p.clone());
            }
        }
        order.push(t);
    }
    order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

    let mut pending: HashMap<u64, Vec<Real>> = HashMap::new();
    pending.insert(root.id(), vec![1.0]);
    for t in &order {
        let Some(g) = pending.remove(&t.id()) else {
            continue;
        };
        match &t.node.backward {
            None => sink(t, g),
            Some(f) => {
                let ctx = BackwardCtx {
                    grad: &g,
                    out: &t.node.data,
                    parents: &t.node.parents,
                };
                let grads = f(&ctx);
                debug_assert_eq!(grads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
    }
}
