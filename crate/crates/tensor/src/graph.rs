//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is created per forward pass and borrows the parameter store
//! immutably. Every differentiable op evaluates eagerly and, when gradients
//! are being tracked, appends a node holding a backward closure. Nodes are
//! appended in evaluation order, so walking them in reverse is a valid
//! topological order for [`Graph::backward`].

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Gradients with respect to each parent of a node, in parent order.
pub(crate) type ParentGrads<T> = Vec<Option<Tensor<T>>>;
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<ParentGrads<T>>>;

enum Leaf {
    None,
    Param(ParamId),
    Input,
}

struct Node<T> {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    leaf: Leaf,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// A value flowing through a [`Graph`].
///
/// Cloning is cheap: the tensor is shared.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
    graph: u64,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value.dim(axis)
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value.as_ref().clone()
    }

    pub(crate) fn arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }
}

/// Counters collected while a graph evaluates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Attention score entries computed (query rows x key columns, summed
    /// over batch and heads).
    pub attention_score_entries: u64,
    /// Attention calls evaluated.
    pub attention_calls: u64,
    /// Largest query row count seen in a single attention call.
    pub max_query_rows: u64,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    inputs: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of an input created with [`Graph::input`].
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.inputs.get(&n))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    training: Cell<bool>,
    id: u64,
    stats: Cell<GraphStats>,
    track_kinks: Cell<bool>,
    kink_hash: Cell<u64>,
    buffer_updates: RefCell<Vec<(BufferId, Tensor<T>)>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph that records backward closures.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::build(store, true)
    }

    /// Graph that records nothing; intermediates are freed as soon as the
    /// caller drops them.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::build(store, false)
    }

    fn build(store: &'p ParamStore<T>, grad_enabled: bool) -> Self {
        Graph {
            store,
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            training: Cell::new(false),
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            stats: Cell::new(GraphStats::default()),
            track_kinks: Cell::new(false),
            kink_hash: Cell::new(0),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_training(self, training: bool) -> Self {
        self.training.set(training);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn stats(&self) -> GraphStats {
        self.stats.get()
    }

    pub(crate) fn count_attention(&self, entries: u64, query_rows: u64) {
        let mut s = self.stats.get();
        s.attention_score_entries += entries;
        s.attention_calls += 1;
        s.max_query_rows = s.max_query_rows.max(query_rows);
        self.stats.set(s);
    }

    /// Enables fingerprinting of the branch decisions taken by
    /// non-differentiable points (ReLU, max-pool).
    pub fn track_kinks(&self, on: bool) {
        self.track_kinks.set(on);
    }

    pub fn kink_fingerprint(&self) -> u64 {
        self.kink_hash.get()
    }

    pub(crate) fn record_kinks(&self, decisions: impl Iterator<Item = u64>) {
        if !self.track_kinks.get() {
            return;
        }
        // FNV-1a over the decision stream
        let mut h = self.kink_hash.get() ^ 0xcbf2_9ce4_8422_2325;
        for d in decisions {
            h ^= d;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kink_hash.set(h);
    }

    pub(crate) fn push_buffer_update(&self, id: BufferId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by train-mode batch norms, to be
    /// applied with [`ParamStore::apply_buffer_updates`].
    pub fn take_buffer_updates(&self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    pub fn buffer(&self, id: BufferId) -> Arc<Tensor<T>> {
        self.store.buffer_arc(id)
    }

    fn push_node(&self, node: Node<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let value = self.store.value_arc(id);
        let node = self.grad_enabled.then(|| {
            self.push_node(Node {
                parents: Vec::new(),
                backward: None,
                leaf: Leaf::Param(id),
            })
        });
        Var {
            value,
            node,
            graph: self.id,
        }
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        let node = self.grad_enabled.then(|| {
            self.push_node(Node {
                parents: Vec::new(),
                backward: None,
                leaf: Leaf::Input,
            })
        });
        Var {
            value: Arc::new(value),
            node,
            graph: self.id,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            node: None,
            graph: self.id,
        }
    }

    /// True when an op over `parents` must record a backward closure.
    pub(crate) fn tracking(&self, parents: &[&Var<T>]) -> bool {
        self.grad_enabled && parents.iter().any(|p| p.node.is_some())
    }

    /// Wraps an op result, recording `backward` when any parent is tracked.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: F,
    ) -> Result<Var<T>>
    where
        F: Fn(&Tensor<T>) -> Result<ParentGrads<T>> + 'static,
    {
        for p in parents {
            debug_assert_eq!(p.graph, self.id, "{op}: operand belongs to another graph");
        }
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let node = if self.tracking(parents) {
            Some(self.push_node(Node {
                parents: parents.iter().map(|p| p.node).collect(),
                backward: Some(Box::new(backward)),
                leaf: Leaf::None,
            }))
        } else {
            None
        };
        Ok(Var {
            value: Arc::new(value),
            node,
            graph: self.id,
        })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: format!("loss must have one element, has shape {:?}", loss.shape()),
            });
        }
        let mut out = Gradients {
            params: HashMap::new(),
            inputs: HashMap::new(),
        };
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match node.leaf {
                Leaf::Param(pid) => {
                    accumulate(out.params.entry(pid), grad)?;
                    continue;
                }
                Leaf::Input => {
                    out.inputs.insert(id, grad);
                    continue;
                }
                Leaf::None => {}
            }
            let backward = node.backward.as_ref().expect("op nodes carry a backward");
            let parent_grads = backward(&grad)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(existing) => existing.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(
    entry: std::collections::hash_map::Entry<'_, ParamId, Tensor<T>>,
    grad: Tensor<T>,
) -> Result<()> {
    use std::collections::hash_map::Entry;
    match entry {
        Entry::Occupied(mut e) => e.get_mut().add_assign(&grad),
        Entry::Vacant(e) => {
            e.insert(grad);
            Ok(())
        }
    }
}
