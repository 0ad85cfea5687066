use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::ops::{backward_op, forward_checked};
use super::{Element, Op, TensorOf};
use crate::error::{Error, Result};

struct Node<E> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Rc<TensorOf<E>>,
    needs_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in evaluation order, which is a valid topological
/// order, so the backward pass is a single reverse sweep. A tape is
/// single-threaded; independent workers use independent tapes.
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    strict: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict: false,
        }
    }

    /// A tape that rejects NaN/Inf at every op boundary.
    pub fn strict() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict: true,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: TensorOf<E>) -> Var<'_, E> {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value: Rc::new(value),
            needs_grad: true,
        })
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: TensorOf<E>) -> Var<'_, E> {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value: Rc::new(value),
            needs_grad: false,
        })
    }

    pub fn value(&self, v: Var<'_, E>) -> Rc<TensorOf<E>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Evaluates `op` and records it.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        let (values, needs_grad): (Vec<Rc<TensorOf<E>>>, bool) = {
            let nodes = self.nodes.borrow();
            let vals = inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let ng = inputs.iter().any(|v| nodes[v.id].needs_grad);
            (vals, ng)
        };
        let refs: Vec<&TensorOf<E>> = values.iter().map(|r| r.as_ref()).collect();
        let out = forward_checked(&op, &refs, self.strict)?;
        Ok(self.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.id).collect(),
            value: Rc::new(out),
            needs_grad,
        }))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// The tape is not modified, so repeated calls return identical
    /// gradients.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<TensorOf<E>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(TensorOf::full(root.value.shape().to_vec(), E::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
            let ins: Vec<&TensorOf<E>> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let local = backward_op(op, &ins, &node.value, &gout, &need);
            grads[id] = Some(gout);
            for (&i, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        if self.strict && grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one loss with respect to every recorded node.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<TensorOf<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient for `v`; a node the loss does not depend on gets zeros.
    pub fn get(&self, v: Var<'_, E>) -> TensorOf<E> {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| TensorOf::zeros(self.shapes[v.id].clone()))
    }

    pub fn try_get(&self, v: Var<'_, E>) -> Option<&TensorOf<E>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Rc<TensorOf<E>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op) -> Result<Var<'t, E>> {
        self.tape.apply(op, &[self])
    }

    fn binary(self, op: Op, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.tape.apply(op, &[self, other])
    }

    pub fn matmul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let batched = self.value().rank() == 3 || other.value().rank() == 3;
        self.binary(if batched { Op::BatchMatMul } else { Op::MatMul }, other)
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(Op::Mul, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, E>> {
        self.unary(Op::Scale(s))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, E>> {
        self.unary(Op::Reshape(shape.into()))
    }

    pub fn transpose(self) -> Result<Var<'t, E>> {
        self.unary(Op::Transpose)
    }

    pub fn rows(self, start: usize, end: usize) -> Result<Var<'t, E>> {
        self.unary(Op::RowSlice { start, end })
    }

    pub fn gather(self, idx: Arc<Vec<Option<usize>>>) -> Result<Var<'t, E>> {
        self.unary(Op::Gather(idx))
    }

    pub fn softmax(self) -> Result<Var<'t, E>> {
        self.unary(Op::Softmax)
    }

    pub fn log_softmax(self) -> Result<Var<'t, E>> {
        self.unary(Op::LogSoftmax)
    }

    pub fn silu(self) -> Result<Var<'t, E>> {
        self.unary(Op::Silu)
    }

    pub fn tanh(self) -> Result<Var<'t, E>> {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t, E>> {
        self.unary(Op::Sigmoid)
    }

    pub fn layer_norm(self) -> Result<Var<'t, E>> {
        self.unary(Op::LayerNorm)
    }

    pub fn mse(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(Op::Mse, other)
    }

    pub fn sum(self) -> Result<Var<'t, E>> {
        self.unary(Op::Sum)
    }

    pub fn l2_norm(self) -> Result<Var<'t, E>> {
        self.unary(Op::L2Norm)
    }

    pub fn cosine(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(Op::Cosine, other)
    }

    pub fn normalize(self) -> Result<Var<'t, E>> {
        self.unary(Op::RowNormalize)
    }

    /// Sum of squared elements.
    pub fn sum_squares(self) -> Result<Var<'t, E>> {
        self.mul(self)?.sum()
    }

    /// `x @ w + b` with `b` a row vector.
    pub fn linear(self, w: Var<'t, E>, b: Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul(w)?.add(b)
    }
}

/// Concatenates along axis 0, or the last axis when `last_axis`.
pub fn concat<'t, E: Element>(parts: &[Var<'t, E>], last_axis: bool) -> Result<Var<'t, E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    first.tape.apply(Op::Concat { last_axis }, parts)
}

impl<'t, E: Element> Var<'t, E> {
    /// Records a constant on the same tape.
    pub fn constant(&self, value: TensorOf<E>) -> Var<'t, E> {
        self.tape.constant(value)
    }
}
