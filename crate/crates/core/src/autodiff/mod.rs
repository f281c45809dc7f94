//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough cached state to run its vector-Jacobian product. Nodes are
//! created in topological order, so `backward` walks the tape from the loss
//! back to the first node. A graph is built fresh for every forward pass
//! and is confined to the thread that built it.

pub mod kernels;
mod ops;

use crate::tensor::{Real, Result, Tensor, TensorError};

pub use ops::Broadcast;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and node accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Affine,
    MatMul,
    Transpose,
    Concat,
    SliceCols,
    SelectRow,
    Reshape,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    LayerNorm,
    Softmax,
    MeanPool,
    MaxPool,
    Sum,
    Cosine,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::SliceCols,
        OpKind::SelectRow,
        OpKind::Reshape,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::MeanPool,
        OpKind::MaxPool,
        OpKind::Sum,
        OpKind::Cosine,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::SelectRow => "select_row",
            OpKind::Reshape => "reshape",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::MeanPool => "mean_pool",
            OpKind::MaxPool => "max_pool",
            OpKind::Sum => "sum",
            OpKind::Cosine => "cosine",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: ops::Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    verify: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            verify: false,
            fault: None,
        }
    }

    /// A graph that rejects any non-finite value entering or produced by it.
    pub fn verifying() -> Self {
        Self {
            verify: true,
            ..Self::new()
        }
    }

    /// Scales the backward pass of every `kind` node by 1.5. Only used to
    /// self-test the gradient-check harness.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn is_verifying(&self) -> bool {
        self.verify
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes of each primitive kind.
    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, ops::Op::Leaf, requires_grad, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        op: ops::Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if self.verify {
            if let Some(index) = value.first_non_finite() {
                return Err(TensorError::NonFinite { op: name, index });
            }
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulates d`loss`/d`v` into every reachable node that requires a
    /// gradient. Accumulation order is the reverse of node creation order,
    /// so a fixed graph always yields bit-identical gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(self.nodes[i].op.kind()) {
                let k = T::lit(1.5);
                let corrupted: Vec<T> = upstream.iter().map(|&g| g * k).collect();
                self.nodes[i].op.backward(&self.nodes, i, &corrupted, &mut grads);
            } else {
                self.nodes[i].op.backward(&self.nodes, i, &upstream, &mut grads);
            }
            grads[i] = Some(upstream);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
            }
        }
        Ok(())
    }
}

/// Adds `contribution` into the gradient slot of `v`, allocating it on first use.
pub(crate) fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    contribution: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    contribution(slot);
}

#[cfg(test)]
mod tests;
