use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adjoint rule of a recorded operation.
///
/// `backward` receives the forward inputs and output together with the
/// gradient flowing into the output, and returns one optional gradient per
/// input. Entries for inputs whose `needs_grad` flag is false may be `None`.
///
/// Crates building on the tape implement this trait for fused kernels whose
/// adjoints are cheaper to state directly than to compose.
pub trait Function<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Element> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it; [`Tape::backward`] visits nodes in exact reverse order.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input. Leaves with `requires_grad` receive accumulated
    /// gradients from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        })
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records `output = op(inputs)`.
    ///
    /// When no input requires a gradient the adjoint is dropped and the
    /// result behaves as a constant.
    pub fn record<'t>(
        &'t self,
        op: impl Function<T> + 'static,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
    ) -> Var<'t, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "var from another tape");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Function<T>>),
            requires_grad,
            grad: None,
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Gradients accumulate into leaves: calling `backward` twice without
    /// [`Tape::zero_grad`] in between doubles them. Intermediate gradients are
    /// released as soon as their node has been processed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(TensorError::contract(
                "backward",
                "loss does not depend on any leaf that requires a gradient",
            ));
        }

        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else {
                if node.requires_grad {
                    let node = &mut nodes[id];
                    match node.grad.as_mut() {
                        Some(acc) => acc.accumulate(&grad),
                        None => node.grad = Some(grad),
                    }
                }
                continue;
            };
            let values: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
            let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = op.backward(&refs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            let input_ids = node.inputs.clone();
            for ((input, g), needed) in input_ids.into_iter().zip(input_grads).zip(needs) {
                let Some(g) = g.filter(|_| needed) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "{}", op.name());
                match pending[input].as_mut() {
                    Some(acc) => acc.accumulate(&g),
                    None => pending[input] = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = (*self.value()).clone();
        self.tape.constant(value)
    }
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
