use std::sync::Arc;

use crate::{NnError, Parameter, Result, Tensor};

/// Produces parent gradients from the output gradient.
///
/// Arguments are the upstream gradient, the parent values in registration
/// order, and a flag per parent telling whether its gradient is wanted.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of operations executed in order; `backward` walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Records a parameter's current value. With `track` false the parameter
    /// is treated as a constant and no gradient is computed for it.
    pub fn param(&mut self, p: &Parameter, track: bool) -> Var {
        self.push(Node {
            value: p.shared_value(),
            parents: Vec::new(),
            backward: None,
            requires_grad: track,
        })
    }

    /// Records the result of a custom operation.
    pub fn op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a single-element root seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(NnError::invalid(
                "backward",
                format!("root must hold one element, shape is {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|p| self.nodes[p.0].value.as_ref()).collect();
            let wanted: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&upstream, &parent_values, &wanted);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, grad), want) in node.parents.iter().zip(parent_grads).zip(&wanted) {
                let (Some(grad), true) = (grad, *want) else {
                    continue;
                };
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the root with respect to every leaf reached by `backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient recorded for `v` into `p.grad`.
    pub fn accumulate_into(&self, v: Var, p: &mut Parameter) {
        if let Some(g) = self.get(v) {
            p.grad_mut().add_assign(g);
        }
    }
}
