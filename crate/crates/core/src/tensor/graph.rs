use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded operation.
///
/// Implementors capture whatever forward state they need when they are
/// constructed; `backward` maps the output gradient to one optional gradient
/// per input (in input order, each shaped like its input).
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    function: Option<Box<dyn Function>>,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that records values but never any backward rules.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, self.grad_enabled, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    /// Leaf with explicit gradient tracking.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad && self.grad_enabled, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record the result of an operation. The backward rule is dropped when no
    /// input needs a gradient.
    pub fn apply(&mut self, inputs: &[Var], value: Tensor, function: impl Function + 'static) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.push(value, true, inputs.to_vec(), Some(Box::new(function)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, inputs: Vec<Var>, function: Option<Box<dyn Function>>) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            function,
        });
        Var(self.nodes.len() - 1)
    }

    /// Populate gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward() called twice without zero_grad()"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(f) = &node.function {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = f.backward(&inputs, &node.value, &grad);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", f.name());
                for (v, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "{}", f.name());
                    match &mut self.grads[v.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}
