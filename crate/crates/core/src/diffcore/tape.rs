//! Gradient tape: an append-only record of executed operations, replayed in
//! reverse to accumulate gradients.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;

/// Reverse rule of a recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input given the gradient of the
    /// output. Entries where `needs[i]` is false may be `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_nonfinite: RefCell<Option<String>>,
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

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), None, true, "leaf")
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), None, false, "constant")
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn push(&self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let name = op.name();
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.insert(value, inputs.iter().map(|v| v.0).collect(), op, requires_grad, name)
    }

    fn insert(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward>>,
        requires_grad: bool,
        name: &str,
    ) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let mut first = self.first_nonfinite.borrow_mut();
            if first.is_none() {
                *first = Some(format!("{name} (node {})", self.nodes.borrow().len()));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, inputs, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Name of the first operation that produced a NaN or infinity, when
    /// finiteness checking is active (debug assertions).
    pub fn first_nonfinite(&self) -> Option<String> {
        self.first_nonfinite.borrow().clone()
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&j, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the root with respect to every recorded leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like it when nothing flowed there.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
