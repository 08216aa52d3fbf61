//! Operation recording and reverse-mode differentiation.
//!
//! Every operation whose inputs live on a [`Tape`] appends a node holding the
//! operation kind, the input node ids and the computed value. [`grad`] walks
//! the tape backwards. The backward rules are written with the same tensor
//! operations as the forward pass, so with `record = true` the gradient is
//! itself a tape value and can be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{self, check_finite, same_shape, Array};
use super::GradError;

/// Operation kinds understood by [`forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    /// `g * (x > 0 ? 1 : slope)` with inputs `(g, x)`; differentiable in `g` only.
    LeakyReluBackward(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Recip,
    Ln,
    Square,
    Sum,
    Mean,
    L2Norm,
    Transpose,
    Reshape(Vec<usize>),
    /// Expands a one-element tensor to the given shape.
    BroadcastScalar(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::LeakyReluBackward(_) => "leaky_relu_backward",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Sqrt => "sqrt",
            OpKind::Recip => "recip",
            OpKind::Ln => "ln",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Norm => "l2_norm",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::BroadcastScalar(_) => "broadcast_scalar",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::LeakyReluBackward(_) => 2,
            _ => 1,
        }
    }
}

fn unary_input<'a>(inputs: &[&'a Array]) -> &'a Array {
    inputs[0]
}

/// Evaluates `kind` on plain arrays.
pub(crate) fn eval(kind: &OpKind, inputs: &[&Array]) -> Result<Array, GradError> {
    let name = kind.name();
    if inputs.len() != kind.arity() {
        return Err(GradError::Arity {
            op: name,
            expected: kind.arity(),
            got: inputs.len(),
        });
    }
    let out = match kind {
        OpKind::MatMul => array::matmul(inputs[0], inputs[1])?,
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::LeakyReluBackward(_) => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(name, a, b)?;
            match *kind {
                OpKind::Add => a.zip(b, |x, y| x + y),
                OpKind::Sub => a.zip(b, |x, y| x - y),
                OpKind::Mul => a.zip(b, |x, y| x * y),
                OpKind::LeakyReluBackward(s) => a.zip(b, |g, x| if x > 0.0 { g } else { g * s }),
                _ => unreachable!(),
            }
        }
        OpKind::Neg => unary_input(inputs).map(|x| -x),
        OpKind::Scale(c) => unary_input(inputs).map(|x| x * c),
        OpKind::AddScalar(c) => unary_input(inputs).map(|x| x + c),
        OpKind::LeakyRelu(s) => unary_input(inputs).map(|x| if x > 0.0 { x } else { x * s }),
        OpKind::Tanh => unary_input(inputs).map(f64::tanh),
        OpKind::Sigmoid => unary_input(inputs).map(sigmoid),
        OpKind::Softplus => unary_input(inputs).map(softplus),
        OpKind::Sqrt => {
            let x = unary_input(inputs);
            if x.data().iter().any(|&v| v < 0.0) {
                return Err(GradError::NonFiniteResult { op: name });
            }
            x.map(f64::sqrt)
        }
        OpKind::Recip => unary_input(inputs).map(|x| 1.0 / x),
        OpKind::Ln => {
            let x = unary_input(inputs);
            if x.data().iter().any(|&v| v <= 0.0) {
                return Err(GradError::NonFiniteResult { op: name });
            }
            x.map(f64::ln)
        }
        OpKind::Square => unary_input(inputs).map(|x| x * x),
        OpKind::Sum => Array::scalar(unary_input(inputs).data().iter().sum()),
        OpKind::Mean => {
            let x = unary_input(inputs);
            Array::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        OpKind::L2Norm => Array::scalar(
            unary_input(inputs)
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt(),
        ),
        OpKind::Transpose => array::transpose(unary_input(inputs))?,
        OpKind::Reshape(shape) => unary_input(inputs).clone().reshaped(shape.clone())?,
        OpKind::BroadcastScalar(shape) => {
            let x = unary_input(inputs);
            let v = x.item().ok_or_else(|| GradError::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: vec![],
            })?;
            if shape.contains(&0) {
                return Err(GradError::InvalidShape {
                    shape: shape.clone(),
                    len: 0,
                });
            }
            Array::full(shape, v)
        }
    };
    check_finite(name, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Node {
    /// `None` marks a leaf.
    op: Option<OpKind>,
    inputs: Vec<usize>,
    value: Rc<Array>,
}

/// Append-only record of operations. Cloning shares the same record.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
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

    /// Registers `value` as a leaf and returns its tape-bound tensor.
    pub fn leaf(&self, value: Array) -> Tensor {
        self.leaf_rc(Rc::new(value))
    }

    /// Puts an existing tensor's value on this tape as a fresh leaf.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        self.leaf_rc(t.value.clone())
    }

    fn leaf_rc(&self, value: Rc<Array>) -> Tensor {
        let id = self.push(None, Vec::new(), value.clone());
        Tensor {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, op: Option<OpKind>, inputs: Vec<usize>, value: Rc<Array>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Re-evaluates every non-leaf node from its recorded inputs and reports
    /// whether all values come out bit-identical.
    pub fn replay_matches(&self) -> Result<bool, GradError> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            let Some(op) = &node.op else {
                continue;
            };
            let inputs: Vec<&Array> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let again = eval(op, &inputs)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Topological order holds when every node's inputs precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(id, n)| n.inputs.iter().all(|&i| i < id))
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// An array value, optionally bound to a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl From<Array> for Tensor {
    fn from(value: Array) -> Self {
        Tensor::constant(value)
    }
}

impl Tensor {
    /// A tensor that is not recorded anywhere.
    pub fn constant(value: Array) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> Option<f64> {
        self.value.item()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut loose from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: self.value.clone(),
            node: None,
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, GradError> {
        forward_op(OpKind::MatMul, &[self, rhs])
    }
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, GradError> {
        forward_op(OpKind::Add, &[self, rhs])
    }
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, GradError> {
        forward_op(OpKind::Sub, &[self, rhs])
    }
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, GradError> {
        forward_op(OpKind::Mul, &[self, rhs])
    }
    pub fn neg(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Neg, &[self])
    }
    pub fn scale(&self, c: f64) -> Result<Tensor, GradError> {
        forward_op(OpKind::Scale(c), &[self])
    }
    pub fn add_scalar(&self, c: f64) -> Result<Tensor, GradError> {
        forward_op(OpKind::AddScalar(c), &[self])
    }
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor, GradError> {
        forward_op(OpKind::LeakyRelu(slope), &[self])
    }
    pub fn tanh(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Tanh, &[self])
    }
    pub fn sigmoid(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Sigmoid, &[self])
    }
    pub fn softplus(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Softplus, &[self])
    }
    pub fn sqrt(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Sqrt, &[self])
    }
    pub fn recip(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Recip, &[self])
    }
    pub fn ln(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Ln, &[self])
    }
    pub fn square(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Square, &[self])
    }
    pub fn sum(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Sum, &[self])
    }
    pub fn mean(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Mean, &[self])
    }
    pub fn l2_norm(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::L2Norm, &[self])
    }
    pub fn transpose(&self) -> Result<Tensor, GradError> {
        forward_op(OpKind::Transpose, &[self])
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, GradError> {
        forward_op(OpKind::Reshape(shape.to_vec()), &[self])
    }
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor, GradError> {
        forward_op(OpKind::BroadcastScalar(shape.to_vec()), &[self])
    }
}

/// Applies `kind` to `inputs`, recording the result when any input is on a tape.
pub fn forward_op(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
    let values: Vec<&Array> = inputs.iter().map(|t| &*t.value).collect();
    let out = Rc::new(eval(&kind, &values)?);

    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if !existing.same(&n.tape) => return Err(GradError::TapeMismatch),
                Some(_) => {}
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(Tensor {
            value: out,
            node: None,
        });
    };
    let ids = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) => n.id,
            None => tape.leaf_rc(t.value.clone()).node.map(|n| n.id).unwrap_or(0),
        })
        .collect();
    let id = tape.push(Some(kind), ids, out.clone());
    Ok(Tensor {
        value: out,
        node: Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
    })
}

/// Computes `d output / d wrt` for each tensor in `wrt`.
///
/// With `record = true` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again. Tensors in `wrt` that `output`
/// does not depend on receive zero gradients.
pub fn grad(output: &Tensor, wrt: &[&Tensor], record: bool) -> Result<Vec<Tensor>, GradError> {
    let out_node = output.node.as_ref().ok_or(GradError::NotOnTape)?;
    if !output.value.is_scalar() {
        return Err(GradError::NotScalarOutput(output.shape().to_vec()));
    }
    let tape = &out_node.tape;
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        let n = w.node.as_ref().ok_or(GradError::NotOnTape)?;
        if !n.tape.same(tape) {
            return Err(GradError::NotOnTape);
        }
        wrt_ids.push(n.id);
    }

    let last = out_node.id;
    let (ops, inputs, values): (Vec<Option<OpKind>>, Vec<Vec<usize>>, Vec<Rc<Array>>) = {
        let nodes = tape.nodes.borrow();
        let mut ops = Vec::with_capacity(last + 1);
        let mut inputs = Vec::with_capacity(last + 1);
        let mut values = Vec::with_capacity(last + 1);
        for n in &nodes[..=last] {
            ops.push(n.op.clone());
            inputs.push(n.inputs.clone());
            values.push(n.value.clone());
        }
        (ops, inputs, values)
    };

    // Only nodes downstream of some `wrt` tensor carry gradient worth computing.
    let mut needed = vec![false; last + 1];
    for &id in &wrt_ids {
        if id <= last {
            needed[id] = true;
        }
    }
    for id in 0..=last {
        if !needed[id] && inputs[id].iter().any(|&i| needed[i]) {
            needed[id] = true;
        }
    }

    let as_tensor = |id: usize| -> Tensor {
        Tensor {
            value: values[id].clone(),
            node: record.then(|| NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    };

    let mut adjoint: Vec<Option<Tensor>> = vec![None; last + 1];
    let mut result: Vec<Option<Tensor>> = vec![None; last + 1];
    let is_wrt: Vec<bool> = {
        let mut v = vec![false; last + 1];
        for &id in &wrt_ids {
            if id <= last {
                v[id] = true;
            }
        }
        v
    };
    if needed[last] {
        adjoint[last] = Some(Tensor::constant(Array::full(output.shape(), 1.0)));
    }

    for id in (0..=last).rev() {
        if !needed[id] {
            continue;
        }
        let Some(g) = adjoint[id].take() else {
            continue;
        };
        if is_wrt[id] {
            result[id] = Some(g.clone());
        }
        let Some(op) = &ops[id] else {
            continue;
        };
        let needs: Vec<bool> = inputs[id].iter().map(|&i| needed[i]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let ins: Vec<Tensor> = inputs[id].iter().map(|&i| as_tensor(i)).collect();
        let out = as_tensor(id);
        let grads = backward_rule(op, &ins, &out, &g, &needs)?;
        for (slot, gi) in inputs[id].iter().zip(grads) {
            if let Some(gi) = gi {
                adjoint[*slot] = Some(match adjoint[*slot].take() {
                    None => gi,
                    Some(prev) => prev.add(&gi)?,
                });
            }
        }
    }

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, w)| {
            result[id]
                .clone()
                .unwrap_or_else(|| Tensor::constant(Array::zeros(w.shape())))
        })
        .collect())
}

fn backward_rule(
    op: &OpKind,
    ins: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>, GradError> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor, GradError>| t.map(|t| vec![Some(t)]);
    match op {
        OpKind::MatMul => {
            let ga = if need(0) {
                Some(g.matmul(&ins[1].transpose()?)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(ins[0].transpose()?.matmul(g)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        OpKind::Add => Ok(vec![
            need(0).then(|| g.clone()),
            need(1).then(|| g.clone()),
        ]),
        OpKind::Sub => Ok(vec![
            need(0).then(|| g.clone()),
            if need(1) { Some(g.neg()?) } else { None },
        ]),
        OpKind::Mul => Ok(vec![
            if need(0) { Some(g.mul(&ins[1])?) } else { None },
            if need(1) { Some(g.mul(&ins[0])?) } else { None },
        ]),
        OpKind::Neg => one(g.neg()),
        OpKind::Scale(c) => one(g.scale(*c)),
        OpKind::AddScalar(_) => Ok(vec![Some(g.clone())]),
        OpKind::LeakyRelu(s) => one(forward_op(OpKind::LeakyReluBackward(*s), &[g, &ins[0]])),
        OpKind::LeakyReluBackward(s) => Ok(vec![
            if need(0) {
                Some(forward_op(OpKind::LeakyReluBackward(*s), &[g, &ins[1]])?)
            } else {
                None
            },
            None,
        ]),
        OpKind::Tanh => one(g.mul(&out.square()?.neg()?.add_scalar(1.0)?)),
        OpKind::Sigmoid => one(g.mul(&out.mul(&out.neg()?.add_scalar(1.0)?)?)),
        OpKind::Softplus => one(g.mul(&ins[0].sigmoid()?)),
        OpKind::Sqrt => one(g.mul(&out.recip()?.scale(0.5)?)),
        OpKind::Recip => one(g.mul(&out.square()?.neg()?)),
        OpKind::Ln => one(g.mul(&ins[0].recip()?)),
        OpKind::Square => one(g.mul(&ins[0].scale(2.0)?)),
        OpKind::Sum => one(g.broadcast_scalar(ins[0].shape())),
        OpKind::Mean => {
            let n = ins[0].value.len() as f64;
            one(g.broadcast_scalar(ins[0].shape())?.scale(1.0 / n))
        }
        OpKind::L2Norm => {
            let factor = g.mul(&out.recip()?)?;
            one(factor.broadcast_scalar(ins[0].shape())?.mul(&ins[0]))
        }
        OpKind::Transpose => one(g.transpose()),
        OpKind::Reshape(_) => one(g.reshape(ins[0].shape())),
        OpKind::BroadcastScalar(_) => one(g.sum()?.reshape(ins[0].shape())),
    }
}
