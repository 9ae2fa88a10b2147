//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op appends one node holding its output value, the ids
//! of its inputs and a backward rule. Nodes are only ever appended, so the tape
//! order is a topological order and a single reverse sweep visits each node
//! exactly once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Computes input gradients from the output gradient.
///
/// Arguments are the output gradient, the input values, the output value and a
/// mask telling which inputs need a gradient. Returned entries for masked-out
/// inputs are ignored and may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert("leaf", Rc::new(value), Vec::new(), None, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert("constant", Rc::new(value), Vec::new(), None, false)
    }

    fn insert(
        &self,
        op: &'static str,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an op result. Rejects non-finite outputs, naming the op.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Result<Var<'_>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        Ok(self.insert(op, Rc::new(value), ids, backward, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a single-element output, seeding it with 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, TensorError> {
        let seed_shape = output.shape();
        if seed_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("output must hold one value, got shape {seed_shape:?}"),
            ));
        }
        self.backward_with(output, Tensor::ones(&seed_shape))
    }

    /// Back-propagates an arbitrary output gradient. Fails with the name of
    /// the first op whose backward pass yields a non-finite gradient.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = backward(&grad, &inputs, &node.value, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "backward arity of {}", node.op);
                for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(g) = g.filter(|_| need) else {
                        continue;
                    };
                    debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape from {}", node.op);
                    if !g.is_finite() {
                        return Err(TensorError::NonFinite { op: node.op });
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // leaves keep their gradient; interior values are dropped once consumed
            if node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        let shapes = nodes
            .iter()
            .map(|n| (n.parents.is_empty() && n.requires_grad).then(|| n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.id, self.op_name())
    }
}

/// Gradients of every leaf reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a differentiable leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        if let Some(g) = self.get(var) {
            return g.clone();
        }
        match self.shapes.get(var.id).and_then(|s| s.as_ref()) {
            Some(shape) => Tensor::zeros(shape),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&var.shape()),
        }
    }
}
