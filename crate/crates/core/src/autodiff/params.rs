//! Named parameter storage and per-forward sessions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;

use super::{Graph, Value, Var};

/// Index of a parameter in its [`ParamStore`], stable for the store's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct ParamEntry {
    pub name: String,
    pub value: Value,
    /// First-moment optimizer state.
    pub m: ArrayD<f64>,
    /// Second-moment optimizer state.
    pub v: ArrayD<f64>,
}

/// All trainable parameters of a model, in registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            m: ArrayD::zeros(value.raw_dim()),
            v: ArrayD::zeros(value.raw_dim()),
            value: Arc::new(value),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Cheap copy-on-write snapshot of all parameter values, shareable
    /// across worker threads for the duration of one step.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            values: Arc::new(self.entries.iter().map(|e| e.value.clone()).collect()),
        }
    }
}

#[derive(Clone)]
pub struct ParamSnapshot {
    values: Arc<Vec<Value>>,
}

impl ParamSnapshot {
    pub fn get(&self, id: ParamId) -> &Value {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One forward/backward pass over a parameter snapshot. Each parameter is
/// materialized as a graph leaf at most once, so every use in the forward
/// pass shares the same node and gradients accumulate correctly.
pub struct Session {
    graph: Graph,
    snapshot: ParamSnapshot,
    leaves: RefCell<Vec<Option<Var>>>,
}

impl Session {
    pub fn new(snapshot: ParamSnapshot) -> Self {
        let n = snapshot.len();
        Session {
            graph: Graph::new(),
            snapshot,
            leaves: RefCell::new(vec![None; n]),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| self.graph.leaf(self.snapshot.get(id).clone()))
            .clone()
    }

    pub fn input(&self, value: ArrayD<f64>) -> Var {
        self.graph.constant(value)
    }

    /// Backward from `root`, returning gradients indexed by [`ParamId`].
    /// Parameters untouched by this graph get `None`.
    pub fn grads(&self, root: &Var) -> Vec<Option<ArrayD<f64>>> {
        let mut raw = root.backward();
        let leaves = self.leaves.borrow();
        leaves
            .iter()
            .map(|slot| slot.as_ref().and_then(|var| raw.take(var)))
            .collect()
    }
}

/// Accumulate per-sample gradient vectors in a fixed order.
pub fn accumulate_grads(
    total: &mut Vec<Option<ArrayD<f64>>>,
    part: Vec<Option<ArrayD<f64>>>,
) {
    if total.is_empty() {
        *total = part;
        return;
    }
    assert_eq!(total.len(), part.len());
    for (acc, p) in total.iter_mut().zip(part) {
        match (acc.as_mut(), p) {
            (Some(a), Some(p)) => *a += &p,
            (None, Some(p)) => *acc = Some(p),
            _ => {}
        }
    }
}

/// Scale every gradient in place (e.g. by 1/batch).
pub fn scale_grads(grads: &mut [Option<ArrayD<f64>>], factor: f64) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * factor);
    }
}
