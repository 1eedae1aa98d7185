//! Dynamic reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, which is already a topological order. [`Graph::backward`] walks
//! the record in reverse, summing gradient contributions across fan-out in
//! a fixed order, and keeps gradients only on leaves.
//!
//! ```
//! use haarnet::autograd::Graph;
//! use haarnet::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::row(&[2.0]));
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
//! ```

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, GRAD_FLOOR};
pub use ops::BinaryKind;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may read.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Which inputs want a gradient; rules may return `None` for the rest.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: None,
        });
        self.backward_done = false;
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; only leaves keep one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Records an operation. The backward rule is dropped when no input
    /// requires a gradient.
    pub fn record<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            grad: None,
        });
        self.backward_done = false;
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, leaving `dloss/dleaf` on every
    /// leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty graph"));
        }
        let shape = self.shape(loss);
        if shape != Shape::scalar() {
            return Err(Error::contract(format!(
                "backward needs a (1, 1, 1, 1) loss, got {shape}"
            )));
        }
        if self.backward_done {
            return Err(Error::State(
                "backward already ran for this forward pass".into(),
            ));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                if node.requires_grad {
                    self.nodes[i].grad = Some(grad);
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let grads = rule(&ctx);
            debug_assert_eq!(grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut pending[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
