//! A small reverse-mode tape.
//!
//! Every op records its output value together with a closure mapping the
//! output gradient to gradients of its inputs. Parameters live in a
//! [`ParamStore`]; a tape pulls them in by id, and after [`Tape::backward`]
//! the per-parameter gradients are collected with [`Gradients::params`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

/// Named parameter tensors shared by every model component.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Inputs handed to a backward closure.
pub struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Whether each input needs a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    scope: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    scope: &'static str,
}

/// Count of backward evaluations per scope label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub per_scope: BTreeMap<&'static str, usize>,
}

impl BackwardStats {
    pub fn count(&self, scope: &str) -> usize {
        self.per_scope.get(scope).copied().unwrap_or(0)
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
    pub stats: BackwardStats,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter pulled into the tape (absent ids were unused).
    pub fn params(&self) -> HashMap<ParamId, &Tensor> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            scope: "default",
            ..Default::default()
        }
    }

    /// Labels subsequently recorded nodes; returns the previous label.
    pub fn set_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes carrying the given scope label.
    pub fn nodes_in_scope(&self, scope: &str) -> usize {
        self.nodes.iter().filter(|n| n.scope == scope).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let scope = self.scope;
        self.push_node(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
            scope,
        })
    }

    /// A leaf that collects gradient but is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let scope = self.scope;
        self.push_node(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
            scope,
        })
    }

    /// Pulls a parameter in; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Records an op. `backward` receives the output gradient and returns one
    /// optional gradient per input.
    pub fn op(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let scope = self.scope;
        self.push_node(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: needs_grad.then_some(backward),
            needs_grad,
            scope,
        })
    }

    /// Detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut stats = BackwardStats::default();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            *stats.per_scope.entry(node.scope).or_default() += 1;
            let ctx = BackCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].needs_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        let mut params: Vec<(ParamId, usize)> =
            self.params.iter().map(|(&id, v)| (id, v.0)).collect();
        params.sort();
        Gradients {
            grads,
            params,
            stats,
        }
    }
}
