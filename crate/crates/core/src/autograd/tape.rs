use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Given the gradient of a node's output and which parents want a gradient,
/// return one optional gradient per parent.
pub(crate) type GradFn<R> = Box<dyn Fn(&Tensor<R>, &[bool]) -> Vec<Option<Tensor<R>>>>;

struct Node<R: Real> {
    value: Arc<Tensor<R>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<R>>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is already a topological order.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    bindings: RefCell<Vec<(u64, usize, usize)>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real> {
    pub(crate) tape: &'t Tape<R>,
    pub(crate) id: usize,
}

impl<R: Real> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<R>) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<R>>) -> Var<'_, R> {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        })
    }

    /// A leaf that accumulates a gradient, reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        })
    }

    /// Bind parameter `index` of `store` as a gradient-tracking leaf.
    pub fn param(&self, store: &ParamStore<R>, index: usize) -> Var<'_, R> {
        let v = self.push_node(Node {
            value: store.value_arc(index),
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        });
        self.bindings
            .borrow_mut()
            .push((store.uid(), index, v.id));
        v
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<R>,
        parents: &[usize],
        grad_fn: impl Fn(&Tensor<R>, &[bool]) -> Vec<Option<Tensor<R>>> + 'static,
    ) -> Var<'_, R> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            grad_fn: if requires_grad {
                Some(Box::new(grad_fn))
            } else {
                None
            },
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<R>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, R>) -> Gradients<R> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), R::one()));
        let mut leaf_grads: HashMap<usize, Tensor<R>> = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.grad_fn {
                Some(f) => {
                    let need: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = f(&g, &need);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), &want) in node.parents.iter().zip(parent_grads).zip(&need) {
                        let Some(pg) = pg else { continue };
                        if !want {
                            continue;
                        }
                        debug_assert_eq!(
                            pg.shape(),
                            nodes[p].value.shape(),
                            "gradient shape mismatch for parent {p} of node {id}"
                        );
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.requires_grad => {
                    leaf_grads.insert(id, g);
                }
                None => {}
            }
        }
        let mut by_param: HashMap<(u64, usize), Tensor<R>> = HashMap::new();
        for &(uid, index, node) in self.bindings.borrow().iter() {
            if let Some(g) = leaf_grads.get(&node) {
                match by_param.get_mut(&(uid, index)) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        by_param.insert((uid, index), g.clone());
                    }
                }
            }
        }
        Gradients {
            by_param,
            by_node: leaf_grads,
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<R: Real> {
    by_param: HashMap<(u64, usize), Tensor<R>>,
    by_node: HashMap<usize, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn param(&self, store: &ParamStore<R>, index: usize) -> Option<&Tensor<R>> {
        self.by_param.get(&(store.uid(), index))
    }

    /// Gradient for a leaf created with [`Tape::leaf`].
    pub fn leaf(&self, v: Var<'_, R>) -> Option<&Tensor<R>> {
        self.by_node.get(&v.id)
    }

    /// One entry per parameter of `store`, `None` for parameters that did
    /// not take part in the loss.
    pub fn for_store(&self, store: &ParamStore<R>) -> Vec<Option<Tensor<R>>> {
        (0..store.len())
            .map(|i| self.param(store, i).cloned())
            .collect()
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn value(&self) -> Arc<Tensor<R>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> R {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v.data()[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, R> {
        self.tape.constant_arc(self.value())
    }
}
