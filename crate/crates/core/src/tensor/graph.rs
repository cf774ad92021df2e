//! Recording op graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output, so the
//! node list is always in topological order. All forward activations are
//! kept for the backward pass.

use std::fmt;
use std::sync::Arc;

use super::kernels as k;
use super::{numel, DType, Result, Tensor, TensorError};

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// An op defined outside this module, e.g. a collective. `backward` returns
/// one gradient per input (ignored for integer-valued inputs).
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Relu(NodeId),
    LayerNorm(NodeId, f64),
    Embedding { table: NodeId, ids: NodeId },
    Softmax(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: NodeId },
    Reshape(NodeId),
    Transpose(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    Slice { x: NodeId, axis: usize, start: usize },
    Concat(Vec<NodeId>, usize),
    Select(NodeId, usize),
    Custom(Arc<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Custom(op, _) => op.name(),
            other => static_name(other),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Embedding { table, ids } => vec![*table, *ids],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![*logits, *labels],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::LayerNorm(a, _)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Transpose(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Slice { x: a, .. }
            | Op::Select(a, _) => vec![*a],
            Op::Concat(xs, _) | Op::Custom(_, xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
}

/// A single-threaded recording of tensor computations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// In checked mode any op producing a non-finite value fails.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn dtype(&self, id: NodeId) -> DType {
        self.nodes[id.0].value.dtype()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    /// Op kind of every node, in recording order.
    pub fn op_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        for input in op.inputs() {
            self.node(input)?;
        }
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: static_name(&op),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            name: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ── Leaves ───────────────────────────────────────────────────────────────

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.input(value);
        self.nodes[id.0].name = Some(name.into());
        id
    }

    // ── Ops ──────────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = k::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = k::add(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = k::mul(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = k::scale(&self.node(a)?.value, c)?;
        self.push(Op::Scale(a, c), v)
    }

    /// `a − b`, composed from add and scale.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = k::gelu(&self.node(a)?.value)?;
        self.push(Op::Gelu(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = k::relu(&self.node(a)?.value)?;
        self.push(Op::Relu(a), v)
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = k::layer_norm(&self.node(a)?.value, eps)?;
        self.push(Op::LayerNorm(a, eps), v)
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId> {
        let v = k::embedding(&self.node(table)?.value, &self.node(ids)?.value)?;
        self.push(Op::Embedding { table, ids }, v)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = k::softmax(&self.node(a)?.value)?;
        self.push(Op::Softmax(a), v)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let v = k::softmax_cross_entropy(&self.node(logits)?.value, &self.node(labels)?.value)?;
        self.push(Op::SoftmaxCrossEntropy { logits, labels }, v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.node(a)?.value.reshape(shape)?;
        self.push(Op::Reshape(a), v)
    }

    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = k::transpose(&self.node(a)?.value, perm)?;
        self.push(Op::Transpose(a, perm.to_vec()), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = k::sum_all(&self.node(a)?.value)?;
        self.push(Op::SumAll(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = k::mean_all(&self.node(a)?.value)?;
        self.push(Op::MeanAll(a), v)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = k::slice(&self.node(x)?.value, axis, start, len)?;
        self.push(Op::Slice { x, axis, start }, v)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let vals = xs
            .iter()
            .map(|&x| self.node(x).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let v = k::concat(&vals, axis)?;
        self.push(Op::Concat(xs.to_vec(), axis), v)
    }

    /// Entry `index` of the leading axis, with that axis dropped.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.node(x)?.value.select(index)?;
        self.push(Op::Select(x, index), v)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals = inputs
            .iter()
            .map(|&x| self.node(x).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let v = op.forward(&vals)?;
        self.push(Op::Custom(op, inputs.to_vec()), v)
    }

    // ── Reverse mode ─────────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    /// Nodes that do not influence the loss get explicit zeros.
    pub fn grad(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let loss_node = self.node(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut wanted = vec![false; self.nodes.len()];
        for &w in wrt {
            if !self.node(w)?.value.dtype().is_float() {
                return Err(TensorError::IntegralGrad { node: w.0 });
            }
            wanted[w.0] = true;
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, mut gin) in self.vjp(node, &g)? {
                let dtype = self.nodes[input.0].value.dtype();
                if !dtype.is_float() {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&gin) {
                            *a += v;
                        }
                        dtype.round_slice(acc);
                    }
                    slot @ None => {
                        dtype.round_slice(&mut gin);
                        *slot = Some(gin);
                    }
                }
            }
            if wanted[i] {
                adj[i] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                let v = &self.nodes[w.0].value;
                match &adj[w.0] {
                    Some(d) => Tensor::from_raw(v.shape().to_vec(), d.clone(), v.dtype()),
                    None => Tensor::zeros(v.shape(), v.dtype()),
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of one node: `(input, gradient)` pairs.
    fn vjp(&self, node: &Node, g: &[f64]) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ga, gb) = k::matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![
                (*a, k::reduce_to(g, val(*a).shape())),
                (*b, k::reduce_to(g, val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (ga, gb) = k::mul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Gelu(a) => vec![(*a, k::gelu_backward(val(*a), g))],
            Op::Relu(a) => vec![(*a, k::relu_backward(val(*a), g))],
            Op::LayerNorm(a, eps) => vec![(*a, k::layer_norm_backward(val(*a), *eps, g))],
            Op::Embedding { table, ids } => vec![(
                *table,
                k::embedding_backward(val(*table).shape(), val(*ids), g),
            )],
            Op::Softmax(a) => vec![(*a, k::softmax_backward(&node.value, g))],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![(
                *logits,
                k::softmax_cross_entropy_backward(val(*logits), val(*labels), g),
            )],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Transpose(a, perm) => {
                let inv = k::inverse_perm(perm);
                vec![(*a, k::transpose_data(g, node.value.shape(), &inv))]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::MeanAll(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, k::slice_backward(val(*x).shape(), *axis, *start, g))]
            }
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                let gt = Tensor::from_raw(node.value.shape().to_vec(), g.to_vec(), DType::F64);
                xs.iter()
                    .map(|&x| {
                        let len = val(x).shape()[*axis];
                        let part = k::slice(&gt, *axis, offset, len)?;
                        offset += len;
                        Ok((x, part.to_vec()))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Select(x, index) => {
                let inner = numel(node.value.shape());
                let mut full = vec![0.0; val(*x).numel()];
                full[index * inner..(index + 1) * inner].copy_from_slice(g);
                vec![(*x, full)]
            }
            Op::Custom(op, xs) => {
                let inputs: Vec<&Tensor> = xs.iter().map(|&x| val(x)).collect();
                let gt = Tensor::from_raw(node.value.shape().to_vec(), g.to_vec(), DType::F64);
                let grads = op.backward(&inputs, &node.value, &gt)?;
                if grads.len() != xs.len() {
                    return Err(TensorError::Custom {
                        op: op.name().to_string(),
                        msg: format!("backward returned {} grads for {} inputs", grads.len(), xs.len()),
                    });
                }
                xs.iter().zip(grads).map(|(&x, t)| (x, t.to_vec())).collect()
            }
        };
        Ok(out)
    }
}

fn static_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "multiply",
        Op::Scale(..) => "scale",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::LayerNorm(..) => "layer_norm",
        Op::Embedding { .. } => "embedding_lookup",
        Op::Softmax(_) => "softmax",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Reshape(_) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::SumAll(_) => "reduce_sum",
        Op::MeanAll(_) => "reduce_mean",
        Op::Slice { .. } => "slice",
        Op::Concat(..) => "concat",
        Op::Select(..) => "select",
        Op::Custom(..) => "custom",
    }
}
