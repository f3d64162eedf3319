//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass. Nodes
//! whose inputs require gradients keep a [`BackwardOp`] that maps the output
//! gradient to input gradients. Graphs are built per step and dropped after
//! the parameter update.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a [`BackwardOp`].
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Forward values of the node's inputs, in registration order.
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether each input requires a gradient; ops may skip the others.
    pub needs_grad: Vec<bool>,
}

/// Local derivative of one recorded operation.
pub trait BackwardOp<T: Float> {
    /// Gradients for each input, in the order the inputs were registered.
    /// `None` means the input receives no gradient from this node.
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records backward closures. Parameters bound to it
    /// are constants.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Gradients are tracked when the graph allows it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad: false })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation result. The backward closure is kept only when
    /// at least one input requires a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl BackwardOp<T> + 'static,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn BackwardOp<T>>> =
            if requires_grad { Some(Box::new(op)) } else { None };
        self.push(Node { value, inputs: inputs.to_vec(), op, requires_grad })
    }

    /// Reverse pass from a single-element `loss`. Gradients of intermediate
    /// nodes are released as soon as they have been propagated; leaf
    /// gradients are returned.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs_grad = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(BackwardCtx {
                grad: &grad,
                inputs,
                output: &node.value,
                needs_grad,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradients of leaves after [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
