//! Reverse-mode differentiation tape.
//!
//! Every differentiable operation implements [`Op`]: a forward evaluation and a
//! vector-Jacobian product. [`Tape::apply`] evaluates an op and, when any input
//! requires a gradient, records it. [`Tape::backward`] consumes the tape and
//! replays the recorded ops in exact reverse order, summing the cotangents of
//! tensors that are used more than once.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Result, Tensor, TensorError};

/// A differentiable operation.
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Cotangent of each input given the output cotangent `grad`. Entries may
    /// be `None` for inputs the op is not differentiable in.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    corrupt: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            corrupt: None,
        }
    }

    /// Debug hook: every VJP of the named op is scaled by 1.5 during backward.
    /// Used as a negative control for the gradient checker.
    pub fn with_corrupted_vjp(op_name: &str) -> Self {
        let mut t = Self::new();
        t.corrupt = Some(op_name.to_string());
        t
    }

    pub fn corrupted_op(&self) -> Option<&str> {
        self.corrupt.as_deref()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self.id, index: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad })
    }

    /// A leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(TensorError::invalid("tape", "variable belongs to a different tape"));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        Ref::map(self.nodes.borrow(), |n| &n[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    /// Evaluates `op` on `inputs` and records it if any input requires a gradient.
    pub fn apply<O: Op + 'static>(&self, op: O, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.index].value).collect();
            let value = op.forward(&values)?;
            (value, inputs.iter().any(|v| nodes[v.index].requires_grad))
        };
        let node = Node {
            value,
            inputs: inputs.iter().map(|v| v.index).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        };
        Ok(self.push(node))
    }

    /// Reverse pass from a scalar `loss`. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.into_inner();
        let loss_value = &nodes[loss.index].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let mut input_grads = op.backward(&inputs, &node.value, &g);
            if self.corrupt.as_deref() == Some(op.name()) {
                for ig in input_grads.iter_mut().flatten() {
                    ig.scale_assign(1.5);
                }
            }
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), nodes[j].value.len(), "{} vjp size", op.name());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the cotangent of leaves and recorded ops for inspection
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }
}

/// Gradient of one tensor; `reached` is false when no path connects it to the loss.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub value: Tensor,
    pub reached: bool,
}

pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros flagged as unreached for tensors off the loss path.
    /// Variables from another tape also come back as unreached, with an empty
    /// scalar placeholder since their shape is unknown here.
    pub fn get_or_zero(&self, v: Var) -> Gradient {
        match self.get(v) {
            Some(g) => Gradient { value: g.clone(), reached: true },
            None => {
                let shape = if v.tape == self.tape { self.shapes[v.index].clone() } else { Vec::new() };
                Gradient { value: Tensor::zeros(&shape), reached: false }
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
