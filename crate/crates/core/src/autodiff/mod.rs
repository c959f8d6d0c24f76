//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! Every forward pass builds a fresh [`Graph`] (a tape of nodes in execution
//! order). Calling [`Var::backward`] walks the tape in reverse, invoking each
//! node's backward closure exactly once and accumulating gradients for the
//! leaves. The engine is single-threaded per graph; data parallelism happens
//! one graph per sample with gradients reduced in a fixed order afterwards,
//! which keeps training bit-for-bit reproducible regardless of thread count.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::ArrayD;

mod conv;
mod ops;
pub mod gradcheck;
pub mod optim;
pub mod params;

pub use params::{ParamId, ParamSnapshot, ParamStore, Session};

pub type Value = Arc<ArrayD<f64>>;

/// Backward closure: receives the gradient flowing into this node's output and
/// returns one gradient contribution per parent, in parent order. Entries for
/// parents that do not require gradients are `None`.
type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// A tape of operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// A node handle plus its forward value.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    value: Value,
    requires_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, parents: Vec<usize>, back: Option<BackFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { parents, back });
        inner.nodes.len() - 1
    }

    /// Leaf that participates in gradient computation (parameters, probes).
    pub fn leaf(&self, value: Value) -> Var {
        let id = self.push(Vec::new(), None);
        Var {
            graph: self.clone(),
            id,
            value,
            requires_grad: true,
        }
    }

    /// Leaf excluded from gradient computation (network inputs, constants).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        let id = self.push(Vec::new(), None);
        Var {
            graph: self.clone(),
            id,
            value: Arc::new(value),
            requires_grad: false,
        }
    }

    /// Register a custom operation. `back` maps the output gradient to one
    /// contribution per parent (in the order given); it is only invoked when
    /// at least one parent requires gradients.
    pub fn op(
        &self,
        parents: &[&Var],
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let ids = parents.iter().map(|p| p.id).collect();
        let back_fn: Option<BackFn> = if requires_grad {
            let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad).collect();
            Some(Box::new(move |g: &ArrayD<f64>| {
                let mut out = back(g);
                for (slot, need) in out.iter_mut().zip(&needs) {
                    if !need {
                        *slot = None;
                    }
                }
                out
            }))
        } else {
            None
        };
        let id = self.push(ids, back_fn);
        Var {
            graph: self.clone(),
            id,
            value: Arc::new(value),
            requires_grad,
        }
    }

    fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

/// Gradients indexed by node id, produced by [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Take the accumulated gradient for a leaf (or any retained node).
    pub fn take(&mut self, var: &Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Var {
    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Extract the single element of a scalar-shaped node.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1, "scalar() on non-scalar var");
        *self.value.iter().next().expect("empty var")
    }

    /// Run reverse-mode accumulation from this (scalar) node.
    ///
    /// Intermediate gradients are dropped as soon as they are consumed; only
    /// gradients of nodes with no backward closure (leaves) are retained.
    pub fn backward(&self) -> Gradients {
        let inner = self.graph.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.requires_grad {
            grads[self.id] = Some(ArrayD::from_elem(self.value.raw_dim(), 1.0));
        }
        for id in (0..=self.id).rev() {
            let node = &inner.nodes[id];
            let Some(back) = node.back.as_ref() else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(grad_out) = grads[id].take() else {
                continue; // node not on a path to the root
            };
            let contributions = back(&grad_out);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[*pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}
