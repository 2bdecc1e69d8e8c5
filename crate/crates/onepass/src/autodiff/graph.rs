//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] records a computation as a flat list of nodes, each holding its
//! operation, parent indices, and current value. Values are computed eagerly
//! when a node is recorded, and can be recomputed after re-binding leaves via
//! [`Graph::forward`], so one recorded graph serves many evaluation points.
//!
//! Two backward passes are provided. [`Graph::vjp`] computes vector-Jacobian
//! products as plain tensors without touching the graph; adjoint buffers are
//! dropped as soon as they have been distributed, so peak memory stays
//! proportional to the widest frontier rather than the whole tape.
//! [`Graph::vjp_recorded`] instead emits the adjoint computation as new graph
//! nodes, which makes gradients themselves differentiable; recording a
//! gradient and then running a plain pass over the extended graph yields
//! Hessian-vector products, and the recording can be nested further for
//! higher orders.

use super::tensor::{self, Tensor};
use thiserror::Error;

/// Index of a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Error, Debug)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("leaf node {0} has no bound value")]
    UnboundLeaf(usize),
    #[error("node {0} is not a leaf and cannot be bound")]
    BindNonLeaf(usize),
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("{op} has no differentiable adjoint; this computation supports one less order of differentiation")]
    NoRecordableAdjoint { op: &'static str },
    #[error("class targets must be integers in 0..{classes}, got {value}")]
    InvalidClassTarget { value: f64, classes: usize },
    #[error("cross-entropy targets must be a non-differentiable node")]
    DifferentiableTargets,
}

type Result<T> = std::result::Result<T, AdError>;

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// Multiply by a compile-time constant.
    ScaleConst(NodeId, f64),
    /// Add a compile-time constant elementwise.
    AddConst(NodeId, f64),
    /// Multiply a tensor by a scalar node.
    ScaleByScalar(NodeId, NodeId),
    /// Add a vector to every row of a matrix.
    AddRowBroadcast(NodeId, NodeId),
    /// Sum a matrix over its rows, leaving one value per column.
    ColumnSums(NodeId),
    /// Repeat a vector as the rows of a matrix.
    BroadcastRows(NodeId, usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// 1 where the input is positive, else 0. Derivative defined as zero.
    Heaviside(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    PowConst(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Max(NodeId),
    /// One-hot mask of the first maximum element. Derivative defined as zero.
    ArgmaxMask(NodeId),
    /// Mean softmax cross-entropy of logit rows against class targets.
    SoftmaxCrossEntropy { logits: NodeId, targets: NodeId },
    /// Gradient of softmax cross-entropy with respect to the logits.
    /// Differentiable one order less than the smooth primitives.
    SoftmaxCeGradLogits { logits: NodeId, targets: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::ScaleByScalar(..) => "scale_by_scalar",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::ColumnSums(..) => "column_sums",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Heaviside(..) => "heaviside",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::PowConst(..) => "pow_const",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::ArgmaxMask(..) => "argmax_mask",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SoftmaxCeGradLogits { .. } => "softmax_ce_grad_logits",
        }
    }

    /// Visit each parent together with whether gradient flows through the edge.
    fn for_each_parent(&self, mut f: impl FnMut(NodeId, bool)) {
        match *self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                f(a, true);
                f(b, true);
            }
            Op::ScaleByScalar(a, s) => {
                f(a, true);
                f(s, true);
            }
            Op::AddRowBroadcast(m, b) => {
                f(m, true);
                f(b, true);
            }
            Op::Neg(a)
            | Op::ScaleConst(a, _)
            | Op::AddConst(a, _)
            | Op::ColumnSums(a)
            | Op::BroadcastRows(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::PowConst(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Max(a) => f(a, true),
            Op::Heaviside(a) | Op::ArgmaxMask(a) => f(a, false),
            Op::SoftmaxCrossEntropy { logits, targets }
            | Op::SoftmaxCeGradLogits { logits, targets } => {
                f(logits, true);
                f(targets, false);
            }
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Whether this node depends on a differentiable leaf through
    /// gradient-carrying edges.
    diff: bool,
    /// Leaves only: false for placeholders that have not been bound yet.
    bound: bool,
}

/// An append-only tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node. Valid once all leaves are bound and any
    /// re-binding has been followed by [`Graph::refresh`].
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    pub fn is_differentiable(&self, id: NodeId) -> bool {
        self.nodes[id.0].diff
    }

    /// A leaf the backward passes differentiate with respect to.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true, true)
    }

    /// A leaf treated as a constant by the backward passes.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false, true)
    }

    /// A constant leaf with a known shape but no value yet. Using the graph
    /// before binding it is an error reported by [`Graph::refresh`].
    pub fn placeholder(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf, Tensor::zeros(shape), false, false)
    }

    /// Replace a leaf's value. The new tensor must keep the leaf's shape.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AdError::BindNonLeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch {
                op: "bind",
                detail: format!(
                    "leaf {} has shape {:?}, new value has shape {:?}",
                    id.0,
                    node.value.shape(),
                    value.shape()
                ),
            });
        }
        node.value = value;
        node.bound = true;
        Ok(())
    }

    /// Recompute every non-leaf value in recording order.
    pub fn refresh(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            match self.nodes[i].op {
                Op::Leaf => {
                    if !self.nodes[i].bound {
                        return Err(AdError::UnboundLeaf(i));
                    }
                }
                op => {
                    self.nodes[i].value = eval(&self.nodes, &op)?;
                }
            }
        }
        Ok(())
    }

    /// Bind the given leaves, recompute the graph, and return the output value.
    pub fn forward(&mut self, output: NodeId, bindings: Vec<(NodeId, Tensor)>) -> Result<Tensor> {
        for (id, value) in bindings {
            self.bind(id, value)?;
        }
        self.refresh()?;
        Ok(self.value(output).clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.val(a).binary(self.val(b), |x, y| x + y);
        Ok(self.push_op(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.val(a).binary(self.val(b), |x, y| x - y);
        Ok(self.push_op(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.val(a).binary(self.val(b), |x, y| x * y);
        Ok(self.push_op(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.val(a).binary(self.val(b), |x, y| x / y);
        Ok(self.push_op(Op::Div(a, b), v))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(|x| -x);
        Ok(self.push_op(Op::Neg(a), v))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.val(a).scale(c);
        Ok(self.push_op(Op::ScaleConst(a, c), v))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.val(a).map(|x| x + c);
        Ok(self.push_op(Op::AddConst(a, c), v))
    }

    pub fn scale_by_scalar(&mut self, a: NodeId, scalar: NodeId) -> Result<NodeId> {
        if !self.val(scalar).is_scalar() {
            return Err(AdError::ShapeMismatch {
                op: "scale_by_scalar",
                detail: format!("scale must be a scalar, got shape {:?}", self.val(scalar).shape()),
            });
        }
        let c = self.val(scalar).item();
        let v = self.val(a).scale(c);
        Ok(self.push_op(Op::ScaleByScalar(a, scalar), v))
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("add_row_broadcast", m)?;
        if self.val(b).shape() != [c] {
            return Err(AdError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!(
                    "bias shape {:?} does not match {c} columns",
                    self.val(b).shape()
                ),
            });
        }
        let v = tensor::add_row_broadcast(self.val(m), self.val(b));
        Ok(self.push_op(Op::AddRowBroadcast(m, b), v))
    }

    pub fn column_sums(&mut self, m: NodeId) -> Result<NodeId> {
        self.matrix_dims("column_sums", m)?;
        let v = tensor::col_sums(self.val(m));
        Ok(self.push_op(Op::ColumnSums(m), v))
    }

    pub fn broadcast_rows(&mut self, vec: NodeId, rows: usize) -> Result<NodeId> {
        if self.val(vec).shape().len() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("expected a vector, got shape {:?}", self.val(vec).shape()),
            });
        }
        let v = tensor::broadcast_rows(self.val(vec), rows);
        Ok(self.push_op(Op::BroadcastRows(vec, rows), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ka) = self.matrix_dims("matmul", a)?;
        let (kb, _) = self.matrix_dims("matmul", b)?;
        if ka != kb {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "inner dimensions differ: {:?} x {:?}",
                    self.val(a).shape(),
                    self.val(b).shape()
                ),
            });
        }
        let v = tensor::matmul(self.val(a), self.val(b));
        Ok(self.push_op(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims("transpose", a)?;
        let v = tensor::transpose(self.val(a));
        Ok(self.push_op(Op::Transpose(a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push_op(Op::Relu(a), v))
    }

    pub fn heaviside(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        Ok(self.push_op(Op::Heaviside(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::exp);
        Ok(self.push_op(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::ln);
        Ok(self.push_op(Op::Log(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::tanh);
        Ok(self.push_op(Op::Tanh(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(sigmoid);
        Ok(self.push_op(Op::Sigmoid(a), v))
    }

    pub fn pow_const(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.val(a).map(|x| x.powf(k));
        Ok(self.push_op(Op::PowConst(a, k), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.val(a).sum());
        Ok(self.push_op(Op::Sum(a), v))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.val(a).numel().max(1);
        let v = Tensor::scalar(self.val(a).sum() / n as f64);
        Ok(self.push_op(Op::Mean(a), v))
    }

    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.val(a).max_with_index();
        Ok(self.push_op(Op::Max(a), Tensor::scalar(m)))
    }

    pub fn argmax_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let v = argmax_mask_value(self.val(a));
        Ok(self.push_op(Op::ArgmaxMask(a), v))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.validate_ce("softmax_cross_entropy", logits, targets)?;
        let v = Tensor::scalar(tensor::softmax_cross_entropy(self.val(logits), self.val(targets)));
        Ok(self.push_op(Op::SoftmaxCrossEntropy { logits, targets }, v))
    }

    pub fn softmax_ce_grad_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.validate_ce("softmax_ce_grad_logits", logits, targets)?;
        let v = tensor::softmax_ce_grad_logits(self.val(logits), self.val(targets));
        Ok(self.push_op(Op::SoftmaxCeGradLogits { logits, targets }, v))
    }

    /// Vector-Jacobian product of one output with respect to `wrt`, as plain
    /// tensors. The graph itself is untouched.
    pub fn vjp(&self, output: NodeId, seed: Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        self.vjp_multi(&[output], vec![seed], wrt)
    }

    /// Vector-Jacobian product of several outputs at once: the adjoint of each
    /// output is seeded with its paired tensor and all contributions to `wrt`
    /// are summed, as if the outputs were concatenated into one vector.
    pub fn vjp_multi(
        &self,
        outputs: &[NodeId],
        seeds: Vec<Tensor>,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        assert_eq!(outputs.len(), seeds.len(), "one seed per output required");
        for (o, s) in outputs.iter().zip(&seeds) {
            if self.val(*o).shape() != s.shape() {
                return Err(AdError::SeedShape {
                    seed: s.shape().to_vec(),
                    output: self.val(*o).shape().to_vec(),
                });
            }
        }
        let reach = self.reachability(wrt);
        let mut keep = vec![false; self.nodes.len()];
        for id in wrt {
            keep[id.0] = true;
        }

        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut hi = 0;
        for (o, s) in outputs.iter().zip(seeds) {
            hi = hi.max(o.0);
            accumulate(&mut adj, o.0, s);
        }
        let mut results: Vec<Option<Tensor>> = (0..wrt.len()).map(|_| None).collect();

        for i in (0..=hi).rev() {
            if adj[i].is_none() || !reach[i] {
                if !keep[i] {
                    adj[i] = None;
                }
                continue;
            }
            let seed = adj[i].take().expect("adjoint present");
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if keep[i] {
                let slots: Vec<usize> = wrt
                    .iter()
                    .enumerate()
                    .filter(|(_, id)| id.0 == i)
                    .map(|(slot, _)| slot)
                    .collect();
                let (&last, rest) = slots.split_last().expect("keep implies a wrt slot");
                for &slot in rest {
                    results[slot] = Some(seed.clone());
                }
                if is_leaf {
                    // Leaves have nothing to distribute to, so the adjoint
                    // buffer can move straight into the result.
                    results[last] = Some(seed);
                    continue;
                }
                results[last] = Some(seed.clone());
            }
            if !is_leaf {
                self.distribute_value(i, seed, &reach, &mut adj);
            }
        }

        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(r, id)| r.unwrap_or_else(|| Tensor::zeros(self.val(*id).shape())))
            .collect())
    }

    /// Gradient of a scalar output with respect to `wrt`, as plain tensors.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let out_val = self.val(output);
        if !out_val.is_scalar() {
            return Err(AdError::NonScalarOutput(out_val.shape().to_vec()));
        }
        self.vjp(output, Tensor::full(out_val.shape(), 1.0), wrt)
    }

    /// Record the vector-Jacobian product as new graph nodes, so the returned
    /// gradients can themselves be differentiated. Seeds are graph nodes.
    pub fn vjp_recorded(
        &mut self,
        outputs: &[NodeId],
        seeds: &[NodeId],
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        assert_eq!(outputs.len(), seeds.len(), "one seed per output required");
        for (o, s) in outputs.iter().zip(seeds) {
            if self.val(*o).shape() != self.val(*s).shape() {
                return Err(AdError::SeedShape {
                    seed: self.val(*s).shape().to_vec(),
                    output: self.val(*o).shape().to_vec(),
                });
            }
        }
        let reach = self.reachability(wrt);
        let len = self.nodes.len();
        let mut adj: Vec<Option<NodeId>> = vec![None; len];
        let mut hi = 0;
        for (o, s) in outputs.iter().zip(seeds) {
            hi = hi.max(o.0);
            match adj[o.0] {
                None => adj[o.0] = Some(*s),
                Some(prev) => adj[o.0] = Some(self.add(prev, *s)?),
            }
        }

        for i in (0..=hi).rev() {
            if !reach[i] {
                continue;
            }
            let Some(seed) = adj[i] else { continue };
            let op = self.nodes[i].op;
            self.distribute_recorded(i, op, seed, &reach, &mut adj)?;
        }

        let mut out = Vec::with_capacity(wrt.len());
        for id in wrt {
            match adj[id.0] {
                Some(n) => out.push(n),
                None => {
                    let zero = Tensor::zeros(self.val(*id).shape());
                    out.push(self.constant(zero));
                }
            }
        }
        Ok(out)
    }

    /// Record the gradient of a scalar output as new graph nodes.
    pub fn grad_recorded(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_val = self.val(output);
        if !out_val.is_scalar() {
            return Err(AdError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let seed = self.constant(Tensor::full(self.val(output).shape(), 1.0));
        self.vjp_recorded(&[output], &[seed], wrt)
    }

    /// Which nodes can pass gradient down to some `wrt` node. Nodes marked
    /// constant are excluded even when listed in `wrt`: their gradient is
    /// zero by definition.
    fn reachability(&self, wrt: &[NodeId]) -> Vec<bool> {
        let mut reach = vec![false; self.nodes.len()];
        for id in wrt {
            if self.nodes[id.0].diff {
                reach[id.0] = true;
            }
        }
        for i in 0..self.nodes.len() {
            if reach[i] {
                continue;
            }
            let mut hit = false;
            self.nodes[i].op.for_each_parent(|p, grad_edge| {
                if grad_edge && reach[p.0] {
                    hit = true;
                }
            });
            reach[i] = hit;
        }
        reach
    }

    /// Push one node's adjoint to its parents. The seed buffer is moved into
    /// its last use and transformed in place where the contribution is an
    /// elementwise function of it, keeping the number of weight-sized
    /// tensors in flight constant.
    fn distribute_value(
        &self,
        i: usize,
        mut seed: Tensor,
        reach: &[bool],
        adj: &mut [Option<Tensor>],
    ) {
        let go = |adj: &mut [Option<Tensor>], id: NodeId, t: Tensor| accumulate(adj, id.0, t);
        match self.nodes[i].op {
            Op::Leaf | Op::Heaviside(_) | Op::ArgmaxMask(_) => {}
            Op::Add(a, b) => {
                if reach[b.0] && reach[a.0] {
                    go(adj, b, seed.clone());
                    go(adj, a, seed);
                } else if reach[b.0] {
                    go(adj, b, seed);
                } else if reach[a.0] {
                    go(adj, a, seed);
                }
            }
            Op::Sub(a, b) => {
                if reach[b.0] && reach[a.0] {
                    go(adj, b, seed.scale(-1.0));
                    go(adj, a, seed);
                } else if reach[b.0] {
                    seed.scale_in_place(-1.0);
                    go(adj, b, seed);
                } else if reach[a.0] {
                    go(adj, a, seed);
                }
            }
            Op::Mul(a, b) => {
                if reach[a.0] && reach[b.0] {
                    go(adj, a, seed.binary(self.val(b), |s, y| s * y));
                    seed.binary_in_place(self.val(a), |s, x| s * x);
                    go(adj, b, seed);
                } else if reach[a.0] {
                    seed.binary_in_place(self.val(b), |s, y| s * y);
                    go(adj, a, seed);
                } else if reach[b.0] {
                    seed.binary_in_place(self.val(a), |s, x| s * x);
                    go(adj, b, seed);
                }
            }
            Op::Div(a, b) => {
                if reach[b.0] {
                    let quot = &self.nodes[i].value;
                    let mut t = seed.binary(quot, |s, q| s * q);
                    t.binary_in_place(self.val(b), |x, y| -x / y);
                    go(adj, b, t);
                }
                if reach[a.0] {
                    seed.binary_in_place(self.val(b), |s, y| s / y);
                    go(adj, a, seed);
                }
            }
            Op::Neg(a) => {
                if reach[a.0] {
                    seed.scale_in_place(-1.0);
                    go(adj, a, seed);
                }
            }
            Op::ScaleConst(a, c) => {
                if reach[a.0] {
                    seed.scale_in_place(c);
                    go(adj, a, seed);
                }
            }
            Op::AddConst(a, _) => {
                if reach[a.0] {
                    go(adj, a, seed);
                }
            }
            Op::ScaleByScalar(a, s) => {
                if reach[s.0] {
                    go(adj, s, Tensor::full(self.val(s).shape(), seed.dot(self.val(a))));
                }
                if reach[a.0] {
                    seed.scale_in_place(self.val(s).item());
                    go(adj, a, seed);
                }
            }
            Op::AddRowBroadcast(m, b) => {
                if reach[b.0] {
                    go(adj, b, tensor::col_sums(&seed));
                }
                if reach[m.0] {
                    go(adj, m, seed);
                }
            }
            Op::ColumnSums(m) => {
                if reach[m.0] {
                    go(adj, m, tensor::broadcast_rows(&seed, self.val(m).rows()));
                }
            }
            Op::BroadcastRows(v, _) => {
                if reach[v.0] {
                    go(adj, v, tensor::col_sums(&seed));
                }
            }
            Op::MatMul(a, b) => {
                if reach[a.0] {
                    go(adj, a, tensor::matmul_a_bt(&seed, self.val(b)));
                }
                if reach[b.0] {
                    go(adj, b, tensor::matmul_at_b(self.val(a), &seed));
                }
            }
            Op::Transpose(a) => {
                if reach[a.0] {
                    go(adj, a, tensor::transpose(&seed));
                }
            }
            Op::Relu(a) => {
                if reach[a.0] {
                    seed.binary_in_place(self.val(a), |s, x| if x > 0.0 { s } else { 0.0 });
                    go(adj, a, seed);
                }
            }
            Op::Exp(a) => {
                if reach[a.0] {
                    seed.binary_in_place(&self.nodes[i].value, |s, e| s * e);
                    go(adj, a, seed);
                }
            }
            Op::Log(a) => {
                if reach[a.0] {
                    seed.binary_in_place(self.val(a), |s, x| s / x);
                    go(adj, a, seed);
                }
            }
            Op::Tanh(a) => {
                if reach[a.0] {
                    seed.binary_in_place(&self.nodes[i].value, |s, t| s * (1.0 - t * t));
                    go(adj, a, seed);
                }
            }
            Op::Sigmoid(a) => {
                if reach[a.0] {
                    seed.binary_in_place(&self.nodes[i].value, |s, y| s * y * (1.0 - y));
                    go(adj, a, seed);
                }
            }
            Op::PowConst(a, k) => {
                if reach[a.0] {
                    seed.binary_in_place(self.val(a), |s, x| s * k * x.powf(k - 1.0));
                    go(adj, a, seed);
                }
            }
            Op::Sum(a) => {
                if reach[a.0] {
                    go(adj, a, Tensor::full(self.val(a).shape(), seed.item()));
                }
            }
            Op::Mean(a) => {
                if reach[a.0] {
                    let n = self.val(a).numel().max(1) as f64;
                    go(adj, a, Tensor::full(self.val(a).shape(), seed.item() / n));
                }
            }
            Op::Max(a) => {
                if reach[a.0] {
                    let mut t = argmax_mask_value(self.val(a));
                    let s = seed.item();
                    for v in t.data_mut() {
                        *v *= s;
                    }
                    go(adj, a, t);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if reach[logits.0] {
                    let g = tensor::softmax_ce_grad_logits(self.val(logits), self.val(targets));
                    go(adj, logits, g.scale(seed.item()));
                }
            }
            Op::SoftmaxCeGradLogits { logits, targets } => {
                if reach[logits.0] {
                    go(adj, logits, softmax_jacobian_vjp(self.val(logits), self.val(targets), &seed));
                }
            }
        }
    }

    fn distribute_recorded(
        &mut self,
        i: usize,
        op: Op,
        seed: NodeId,
        reach: &[bool],
        adj: &mut [Option<NodeId>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Heaviside(_) | Op::ArgmaxMask(_) => {}
            Op::Add(a, b) => {
                self.acc_node(adj, a, seed, reach)?;
                self.acc_node(adj, b, seed, reach)?;
            }
            Op::Sub(a, b) => {
                self.acc_node(adj, a, seed, reach)?;
                if reach[b.0] {
                    let n = self.neg(seed)?;
                    self.acc_node(adj, b, n, reach)?;
                }
            }
            Op::Mul(a, b) => {
                if reach[a.0] {
                    let n = self.mul(seed, b)?;
                    self.acc_node(adj, a, n, reach)?;
                }
                if reach[b.0] {
                    let n = self.mul(seed, a)?;
                    self.acc_node(adj, b, n, reach)?;
                }
            }
            Op::Div(a, b) => {
                if reach[a.0] {
                    let n = self.div(seed, b)?;
                    self.acc_node(adj, a, n, reach)?;
                }
                if reach[b.0] {
                    let quot = NodeId(i);
                    let sq = self.mul(seed, quot)?;
                    let frac = self.div(sq, b)?;
                    let n = self.neg(frac)?;
                    self.acc_node(adj, b, n, reach)?;
                }
            }
            Op::Neg(a) => {
                if reach[a.0] {
                    let n = self.neg(seed)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::ScaleConst(a, c) => {
                if reach[a.0] {
                    let n = self.scale_const(seed, c)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::AddConst(a, _) => {
                self.acc_node(adj, a, seed, reach)?;
            }
            Op::ScaleByScalar(a, s) => {
                if reach[a.0] {
                    let n = self.scale_by_scalar(seed, s)?;
                    self.acc_node(adj, a, n, reach)?;
                }
                if reach[s.0] {
                    let prod = self.mul(seed, a)?;
                    let total = self.sum(prod)?;
                    let n = self.reshape_scalar_like(total, s)?;
                    self.acc_node(adj, s, n, reach)?;
                }
            }
            Op::AddRowBroadcast(m, b) => {
                self.acc_node(adj, m, seed, reach)?;
                if reach[b.0] {
                    let n = self.column_sums(seed)?;
                    self.acc_node(adj, b, n, reach)?;
                }
            }
            Op::ColumnSums(m) => {
                if reach[m.0] {
                    let rows = self.val(m).rows();
                    let n = self.broadcast_rows(seed, rows)?;
                    self.acc_node(adj, m, n, reach)?;
                }
            }
            Op::BroadcastRows(v, _) => {
                if reach[v.0] {
                    let n = self.column_sums(seed)?;
                    self.acc_node(adj, v, n, reach)?;
                }
            }
            Op::MatMul(a, b) => {
                if reach[a.0] {
                    let bt = self.transpose(b)?;
                    let n = self.matmul(seed, bt)?;
                    self.acc_node(adj, a, n, reach)?;
                }
                if reach[b.0] {
                    let at = self.transpose(a)?;
                    let n = self.matmul(at, seed)?;
                    self.acc_node(adj, b, n, reach)?;
                }
            }
            Op::Transpose(a) => {
                if reach[a.0] {
                    let n = self.transpose(seed)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Relu(a) => {
                if reach[a.0] {
                    let h = self.heaviside(a)?;
                    let n = self.mul(seed, h)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Exp(a) => {
                if reach[a.0] {
                    let n = self.mul(seed, NodeId(i))?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Log(a) => {
                if reach[a.0] {
                    let n = self.div(seed, a)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Tanh(a) => {
                if reach[a.0] {
                    let t2 = self.mul(NodeId(i), NodeId(i))?;
                    let neg = self.neg(t2)?;
                    let one_minus = self.add_const(neg, 1.0)?;
                    let n = self.mul(seed, one_minus)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Sigmoid(a) => {
                if reach[a.0] {
                    let this = NodeId(i);
                    let neg = self.neg(this)?;
                    let one_minus = self.add_const(neg, 1.0)?;
                    let deriv = self.mul(this, one_minus)?;
                    let n = self.mul(seed, deriv)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::PowConst(a, k) => {
                if reach[a.0] {
                    let pk = self.pow_const(a, k - 1.0)?;
                    let prod = self.mul(seed, pk)?;
                    let n = self.scale_const(prod, k)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Sum(a) => {
                if reach[a.0] {
                    let ones = self.constant(Tensor::full(self.val(a).shape(), 1.0));
                    let n = self.scale_by_scalar(ones, seed)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Mean(a) => {
                if reach[a.0] {
                    let shape = self.val(a).shape().to_vec();
                    let n_elems = self.val(a).numel().max(1) as f64;
                    let ones = self.constant(Tensor::full(&shape, 1.0));
                    let spread = self.scale_by_scalar(ones, seed)?;
                    let n = self.scale_const(spread, 1.0 / n_elems)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::Max(a) => {
                if reach[a.0] {
                    let mask = self.argmax_mask(a)?;
                    let n = self.scale_by_scalar(mask, seed)?;
                    self.acc_node(adj, a, n, reach)?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if reach[logits.0] {
                    let g = self.softmax_ce_grad_logits(logits, targets)?;
                    let n = self.scale_by_scalar(g, seed)?;
                    self.acc_node(adj, logits, n, reach)?;
                }
            }
            Op::SoftmaxCeGradLogits { .. } => {
                return Err(AdError::NoRecordableAdjoint {
                    op: "softmax_ce_grad_logits",
                });
            }
        }
        Ok(())
    }

    fn acc_node(
        &mut self,
        adj: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
        reach: &[bool],
    ) -> Result<()> {
        if !reach[target.0] {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }

    /// Adapt a scalar node's shape (`[]` vs `[1]`) to match another scalar.
    fn reshape_scalar_like(&mut self, scalar: NodeId, like: NodeId) -> Result<NodeId> {
        if self.val(scalar).shape() == self.val(like).shape() {
            return Ok(scalar);
        }
        let ones = self.constant(Tensor::full(self.val(like).shape(), 1.0));
        self.scale_by_scalar(ones, scalar)
    }

    fn validate_ce(&self, op: &'static str, logits: NodeId, targets: NodeId) -> Result<()> {
        let (r, c) = self.matrix_dims(op, logits)?;
        if self.nodes[targets.0].diff {
            return Err(AdError::DifferentiableTargets);
        }
        if self.val(targets).numel() != r {
            return Err(AdError::ShapeMismatch {
                op,
                detail: format!(
                    "{} targets for {} logit rows",
                    self.val(targets).numel(),
                    r
                ),
            });
        }
        for &t in self.val(targets).data() {
            if t.fract() != 0.0 || t < 0.0 || t as usize >= c {
                return Err(AdError::InvalidClassTarget { value: t, classes: c });
            }
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(AdError::ShapeMismatch {
                op,
                detail: format!(
                    "operand shapes {:?} and {:?}",
                    self.val(a).shape(),
                    self.val(b).shape()
                ),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.val(a).shape();
        if s.len() != 2 {
            return Err(AdError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> NodeId {
        let mut diff = false;
        op.for_each_parent(|p, grad_edge| {
            if grad_edge && self.nodes[p.0].diff {
                diff = true;
            }
        });
        self.push(op, value, diff, true)
    }

    fn push(&mut self, op: Op, value: Tensor, diff: bool, bound: bool) -> NodeId {
        self.nodes.push(Node { op, value, diff, bound });
        NodeId(self.nodes.len() - 1)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut adj[idx] {
        None => adj[idx] = Some(t),
        Some(existing) => existing.add_assign(&t),
    }
}

fn argmax_mask_value(t: &Tensor) -> Tensor {
    let (_, idx) = t.max_with_index();
    let mut out = Tensor::zeros(t.shape());
    out.data_mut()[idx] = 1.0;
    out
}

/// Per-row product with the softmax Jacobian, scaled by 1/rows:
/// `(diag(s) - s s^T) v / rows` for each row, with `s = softmax(row)`.
fn softmax_jacobian_vjp(logits: &Tensor, _targets: &Tensor, seed: &Tensor) -> Tensor {
    let shape = logits.shape();
    let (r, c) = (shape[0], shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data()[i * c..(i + 1) * c];
        let v = &seed.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let s: Vec<f64> = row.iter().map(|&z| (z - m).exp() / denom).collect();
        let sv: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = s[j] * (v[j] - sv) / r as f64;
        }
    }
    Tensor::matrix(r, c, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluate one op from its parents' current values.
fn eval(nodes: &[Node], op: &Op) -> Result<Tensor> {
    let val = |id: &NodeId| &nodes[id.0].value;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::Add(a, b) => val(a).binary(val(b), |x, y| x + y),
        Op::Sub(a, b) => val(a).binary(val(b), |x, y| x - y),
        Op::Mul(a, b) => val(a).binary(val(b), |x, y| x * y),
        Op::Div(a, b) => val(a).binary(val(b), |x, y| x / y),
        Op::Neg(a) => val(a).map(|x| -x),
        Op::ScaleConst(a, c) => val(a).scale(*c),
        Op::AddConst(a, c) => val(a).map(|x| x + c),
        Op::ScaleByScalar(a, s) => val(a).scale(val(s).item()),
        Op::AddRowBroadcast(m, b) => tensor::add_row_broadcast(val(m), val(b)),
        Op::ColumnSums(m) => tensor::col_sums(val(m)),
        Op::BroadcastRows(v, rows) => tensor::broadcast_rows(val(v), *rows),
        Op::MatMul(a, b) => tensor::matmul(val(a), val(b)),
        Op::Transpose(a) => tensor::transpose(val(a)),
        Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Heaviside(a) => val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Tanh(a) => val(a).map(f64::tanh),
        Op::Sigmoid(a) => val(a).map(sigmoid),
        Op::PowConst(a, k) => val(a).map(|x| x.powf(*k)),
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
        Op::Mean(a) => Tensor::scalar(val(a).sum() / val(a).numel().max(1) as f64),
        Op::Max(a) => Tensor::scalar(val(a).max_with_index().0),
        Op::ArgmaxMask(a) => argmax_mask_value(val(a)),
        Op::SoftmaxCrossEntropy { logits, targets } => {
            validate_targets(val(targets), val(logits).shape()[1])?;
            Tensor::scalar(tensor::softmax_cross_entropy(val(logits), val(targets)))
        }
        Op::SoftmaxCeGradLogits { logits, targets } => {
            validate_targets(val(targets), val(logits).shape()[1])?;
            tensor::softmax_ce_grad_logits(val(logits), val(targets))
        }
    })
}

fn validate_targets(targets: &Tensor, classes: usize) -> Result<()> {
    for &t in targets.data() {
        if t.fract() != 0.0 || t < 0.0 || t as usize >= classes {
            return Err(AdError::InvalidClassTarget { value: t, classes });
        }
    }
    Ok(())
}
