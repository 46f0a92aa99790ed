//! Dense f64 tensors and a reverse-mode autodiff graph over a fixed op set.
//!
//! The graph is define-by-run: recording an op validates shapes and computes
//! the forward value immediately, so every intermediate is retained for the
//! backward pass. `backward` walks the nodes in reverse insertion order,
//! which is reverse topological order because an op can only consume node
//! ids that already exist.
//!
//! Everything is 64-bit. Softmax subtracts the row max and softplus is
//! computed in log1p form, so forward values stay finite on finite inputs.

use std::fmt;

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Errors raised while recording ops or running backward.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    NotMatrix {
        op: &'static str,
        shape: Vec<usize>,
    },
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    EmptyInput(&'static str),
    InvalidEps(f64),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DataLength {
                shape,
                expected,
                got,
            } => write!(
                f,
                "shape {:?} implies {} values but {} were provided",
                shape, expected, got
            ),
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{}: incompatible shapes {:?} and {:?}", op, left, right)
            }
            Self::NotMatrix { op, shape } => {
                write!(f, "{}: expected a 2-d tensor, got shape {:?}", op, shape)
            }
            Self::NotScalar { op, shape } => {
                write!(f, "{}: expected a scalar, got shape {:?}", op, shape)
            }
            Self::IndexOutOfRange { op, index, bound } => {
                write!(f, "{}: index {} out of range (bound {})", op, index, bound)
            }
            Self::EmptyInput(op) => write!(f, "{}: empty input", op),
            Self::InvalidEps(eps) => {
                write!(f, "grad_check: eps {} outside (0, 1e-3]", eps)
            }
        }
    }
}

impl std::error::Error for TensorError {}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is rank-1 with length = lhs column count; added to every row.
    RowVector,
    /// rhs has shape [n, 1] against lhs [n, m]; multiplied into every column.
    ColVector,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add(Broadcast),
    Mul(Broadcast),
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Softplus,
    Softmax,
    LayerNorm { eps: f64 },
    Embedding { ids: Vec<usize> },
    MeanPool { mask: Vec<bool> },
    Reshape,
    Transpose,
    Sum,
    Scale { factor: f64 },
    ConcatCols { widths: Vec<usize> },
    SliceCols { start: usize, end: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    tensor: Tensor,
}

/// Computation graph: topologically ordered op records with retained values.
///
/// Single-threaded by construction; independent graphs may run concurrently.
#[derive(Debug, Default)]
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

    /// Insert a leaf carrying the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], tensor)
    }

    /// Insert a non-trainable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.push(Op::Leaf, vec![], tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient accumulated at `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, mut tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad
            || inputs.iter().any(|i| self.nodes[i.0].tensor.requires_grad);
        tensor.requires_grad = needs;
        tensor.grad = None;
        self.nodes.push(Node { op, inputs, tensor });
        NodeId(self.nodes.len() - 1)
    }

    fn as_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let t = self.value(id);
        if t.shape().len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tensor = Tensor::new(vec![m, n], out).expect("matmul output length");
        Ok(self.push(Op::MatMul, vec![a, b], tensor))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (la, lb) = (self.value(a), self.value(b));
        let bc = if la.shape() == lb.shape() {
            Broadcast::Same
        } else if lb.shape().len() == 1 && la.shape().len() == 2 && lb.cols() == la.cols() {
            Broadcast::RowVector
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: la.shape().to_vec(),
                right: lb.shape().to_vec(),
            });
        };
        let mut out = la.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, v) in out.iter_mut().zip(lb.data()) {
                    *o += v;
                }
            }
            Broadcast::RowVector => {
                let cols = la.cols();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += lb.data()[i % cols];
                }
            }
            Broadcast::ColVector => unreachable!(),
        }
        let tensor = Tensor::new(la.shape().to_vec(), out).expect("add output length");
        Ok(self.push(Op::Add(bc), vec![a, b], tensor))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (la, lb) = (self.value(a), self.value(b));
        let bc = if la.shape() == lb.shape() {
            Broadcast::Same
        } else if la.shape().len() == 2
            && lb.shape().len() == 2
            && lb.shape() == [la.shape()[0], 1]
        {
            Broadcast::ColVector
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: la.shape().to_vec(),
                right: lb.shape().to_vec(),
            });
        };
        let mut out = la.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, v) in out.iter_mut().zip(lb.data()) {
                    *o *= v;
                }
            }
            Broadcast::ColVector => {
                let cols = la.cols();
                for (i, o) in out.iter_mut().enumerate() {
                    *o *= lb.data()[i / cols];
                }
            }
            Broadcast::RowVector => unreachable!(),
        }
        let tensor = Tensor::new(la.shape().to_vec(), out).expect("mul output length");
        Ok(self.push(Op::Mul(bc), vec![a, b], tensor))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("relu output length");
        self.push(Op::Relu, vec![x], tensor)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("gelu output length");
        self.push(Op::Gelu, vec![x], tensor)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| sigmoid_fwd(v)).collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("sigmoid output length");
        self.push(Op::Sigmoid, vec![x], tensor)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.ln()).collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("log output length");
        self.push(Op::Log, vec![x], tensor)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("softplus output length");
        self.push(Op::Softplus, vec![x], tensor)
    }

    /// Softmax along the last axis (whole vector for 1-d, per row for 2-d).
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("softmax output length");
        self.push(Op::Softmax, vec![x], tensor)
    }

    /// Layer normalization over the last axis with affine gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let cols = self.value(x).cols();
        for (name, id) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
            let t = self.value(id);
            if t.shape() != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: if name.ends_with("gamma") {
                        "layer_norm(gamma)"
                    } else {
                        "layer_norm(beta)"
                    },
                    left: self.value(x).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let t = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv) + b[j];
            }
        }
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("layer_norm output length");
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], tensor))
    }

    /// Row lookup: `table` is [vocab, d]; output is [ids.len(), d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (vocab, d) = self.as_matrix("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::EmptyInput("embedding"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let tensor = Tensor::new(vec![ids.len(), d], out).expect("embedding output length");
        Ok(self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![table],
            tensor,
        ))
    }

    /// Mean over the masked-in rows of a 2-d tensor; output is rank-1 [d].
    pub fn mean_pool(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.as_matrix("mean_pool", x)?;
        if mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool",
                left: vec![rows, d],
                right: vec![mask.len()],
            });
        }
        let k = mask.iter().filter(|m| **m).count();
        if k == 0 {
            return Err(TensorError::EmptyInput("mean_pool"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for (i, sel) in mask.iter().enumerate() {
            if *sel {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += src[i * d + j];
                }
            }
        }
        for o in out.iter_mut() {
            *o /= k as f64;
        }
        let tensor = Tensor::vector(out);
        Ok(self.push(
            Op::MeanPool {
                mask: mask.to_vec(),
            },
            vec![x],
            tensor,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != t.numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: t.numel(),
            });
        }
        let tensor = Tensor::new(shape.to_vec(), t.data().to_vec()).expect("reshape length");
        Ok(self.push(Op::Reshape, vec![x], tensor))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.as_matrix("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tensor = Tensor::new(vec![n, m], out).expect("transpose output length");
        Ok(self.push(Op::Transpose, vec![x], tensor))
    }

    /// Sum of all entries; output is a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    /// Multiply every entry by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let tensor = Tensor::new(t.shape().to_vec(), out).expect("scale output length");
        self.push(Op::Scale { factor }, vec![x], tensor)
    }

    /// Concatenate 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_cols"));
        }
        let (rows, _) = self.as_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.as_matrix("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let tensor = Tensor::new(vec![rows, total], out).expect("concat_cols output length");
        Ok(self.push(Op::ConcatCols { widths }, parts.to_vec(), tensor))
    }

    /// Column range `[start, end)` of a 2-d tensor.
    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.as_matrix("slice_cols", x)?;
        if start >= end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        let tensor = Tensor::new(vec![rows, w], out).expect("slice_cols output length");
        Ok(self.push(Op::SliceCols { start, end }, vec![x], tensor))
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` node receives
    /// its accumulated gradient; gradients from multiple consumers add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.tensor.grad = if node.tensor.requires_grad {
                Some(vec![0.0; node.tensor.numel()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            // Loss does not depend on any trainable tensor; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].tensor.grad.is_none() {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let out_grad = node.tensor.grad.take().unwrap();
            self::backprop_node(node, &out_grad, done);
            node.tensor.grad = Some(out_grad);
        }
        Ok(())
    }
}

/// Propagate `out_grad` of `node` into its input nodes (all of which precede
/// it, so they live in `done`).
fn backprop_node(node: &Node, out_grad: &[f64], done: &mut [Node]) {
    let inputs = node.inputs.clone();
    let needs: Vec<bool> = inputs
        .iter()
        .map(|i| done[i.0].tensor.grad.is_some())
        .collect();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let a = inputs[0].0;
            let b = inputs[1].0;
            let (m, k) = (done[a].tensor.shape()[0], done[a].tensor.shape()[1]);
            let n = done[b].tensor.shape()[1];
            if needs[0] {
                // dA = dC * B^T
                let bd = done[b].tensor.data().to_vec();
                let ga = done[a].tensor.grad.as_mut().unwrap();
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += out_grad[i * n + t] * bd[j * n + t];
                        }
                        ga[i * k + j] += acc;
                    }
                }
            }
            if needs[1] {
                // dB = A^T * dC
                let ad = done[a].tensor.data().to_vec();
                let gb = done[b].tensor.grad.as_mut().unwrap();
                for j in 0..k {
                    for t in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ad[i * k + j] * out_grad[i * n + t];
                        }
                        gb[j * n + t] += acc;
                    }
                }
            }
        }
        Op::Add(bc) => {
            if needs[0] {
                let ga = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for (g, og) in ga.iter_mut().zip(out_grad) {
                    *g += og;
                }
            }
            if needs[1] {
                match bc {
                    Broadcast::Same => {
                        let gb = done[inputs[1].0].tensor.grad.as_mut().unwrap();
                        for (g, og) in gb.iter_mut().zip(out_grad) {
                            *g += og;
                        }
                    }
                    Broadcast::RowVector => {
                        let gb = done[inputs[1].0].tensor.grad.as_mut().unwrap();
                        let cols = gb.len();
                        for (i, og) in out_grad.iter().enumerate() {
                            gb[i % cols] += og;
                        }
                    }
                    Broadcast::ColVector => unreachable!(),
                }
            }
        }
        Op::Mul(bc) => {
            let a = inputs[0].0;
            let b = inputs[1].0;
            match bc {
                Broadcast::Same => {
                    if needs[0] {
                        let bd = done[b].tensor.data().to_vec();
                        let ga = done[a].tensor.grad.as_mut().unwrap();
                        for ((g, og), v) in ga.iter_mut().zip(out_grad).zip(&bd) {
                            *g += og * v;
                        }
                    }
                    if needs[1] {
                        let ad = done[a].tensor.data().to_vec();
                        let gb = done[b].tensor.grad.as_mut().unwrap();
                        for ((g, og), v) in gb.iter_mut().zip(out_grad).zip(&ad) {
                            *g += og * v;
                        }
                    }
                }
                Broadcast::ColVector => {
                    let cols = done[a].tensor.cols();
                    if needs[0] {
                        let bd = done[b].tensor.data().to_vec();
                        let ga = done[a].tensor.grad.as_mut().unwrap();
                        for (i, (g, og)) in ga.iter_mut().zip(out_grad).enumerate() {
                            *g += og * bd[i / cols];
                        }
                    }
                    if needs[1] {
                        let ad = done[a].tensor.data().to_vec();
                        let gb = done[b].tensor.grad.as_mut().unwrap();
                        for (i, og) in out_grad.iter().enumerate() {
                            gb[i / cols] += og * ad[i];
                        }
                    }
                }
                Broadcast::RowVector => unreachable!(),
            }
        }
        Op::Relu => {
            if needs[0] {
                let x = done[inputs[0].0].tensor.data().to_vec();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for ((g, og), v) in g.iter_mut().zip(out_grad).zip(&x) {
                    if *v > 0.0 {
                        *g += og;
                    }
                }
            }
        }
        Op::Gelu => {
            if needs[0] {
                let x = done[inputs[0].0].tensor.data().to_vec();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for ((g, og), v) in g.iter_mut().zip(out_grad).zip(&x) {
                    *g += og * gelu_bwd(*v);
                }
            }
        }
        Op::Sigmoid => {
            if needs[0] {
                let y = node.tensor.data().to_vec();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for ((g, og), s) in g.iter_mut().zip(out_grad).zip(&y) {
                    *g += og * s * (1.0 - s);
                }
            }
        }
        Op::Log => {
            if needs[0] {
                let x = done[inputs[0].0].tensor.data().to_vec();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for ((g, og), v) in g.iter_mut().zip(out_grad).zip(&x) {
                    *g += og / v;
                }
            }
        }
        Op::Softplus => {
            if needs[0] {
                let x = done[inputs[0].0].tensor.data().to_vec();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for ((g, og), v) in g.iter_mut().zip(out_grad).zip(&x) {
                    *g += og * sigmoid_fwd(*v);
                }
            }
        }
        Op::Softmax => {
            if needs[0] {
                let y = node.tensor.data().to_vec();
                let cols = node.tensor.cols();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for r in 0..y.len() / cols {
                    let row = &y[r * cols..(r + 1) * cols];
                    let og = &out_grad[r * cols..(r + 1) * cols];
                    let dot: f64 = row.iter().zip(og).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        g[r * cols + j] += row[j] * (og[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { eps } => {
            let x = done[inputs[0].0].tensor.data().to_vec();
            let gamma = done[inputs[1].0].tensor.data().to_vec();
            let cols = gamma.len();
            for r in 0..x.len() / cols {
                let row = &x[r * cols..(r + 1) * cols];
                let og = &out_grad[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                if needs[1] {
                    let gg = done[inputs[1].0].tensor.grad.as_mut().unwrap();
                    for j in 0..cols {
                        gg[j] += og[j] * xhat[j];
                    }
                }
                if needs[2] {
                    let gb = done[inputs[2].0].tensor.grad.as_mut().unwrap();
                    for j in 0..cols {
                        gb[j] += og[j];
                    }
                }
                if needs[0] {
                    let dxhat: Vec<f64> = (0..cols).map(|j| og[j] * gamma[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let gx = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                    for j in 0..cols {
                        gx[r * cols + j] +=
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::Embedding { ids } => {
            if needs[0] {
                let d = node.tensor.cols();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += out_grad[t * d + j];
                    }
                }
            }
        }
        Op::MeanPool { mask } => {
            if needs[0] {
                let k = mask.iter().filter(|m| **m).count() as f64;
                let d = out_grad.len();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for (i, sel) in mask.iter().enumerate() {
                    if *sel {
                        for j in 0..d {
                            g[i * d + j] += out_grad[j] / k;
                        }
                    }
                }
            }
        }
        Op::Reshape => {
            if needs[0] {
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for (g, og) in g.iter_mut().zip(out_grad) {
                    *g += og;
                }
            }
        }
        Op::Transpose => {
            if needs[0] {
                // node output is [n, m]; input was [m, n]
                let n = node.tensor.shape()[0];
                let m = node.tensor.shape()[1];
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] += out_grad[j * m + i];
                    }
                }
            }
        }
        Op::Sum => {
            if needs[0] {
                let og = out_grad[0];
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for g in g.iter_mut() {
                    *g += og;
                }
            }
        }
        Op::Scale { factor } => {
            if needs[0] {
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for (g, og) in g.iter_mut().zip(out_grad) {
                    *g += og * factor;
                }
            }
        }
        Op::ConcatCols { widths } => {
            let rows = node.tensor.shape()[0];
            let total = node.tensor.shape()[1];
            let mut offset = 0;
            for (p, &w) in inputs.iter().zip(widths) {
                if done[p.0].tensor.grad.is_some() {
                    let g = done[p.0].tensor.grad.as_mut().unwrap();
                    for i in 0..rows {
                        for j in 0..w {
                            g[i * w + j] += out_grad[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { start, end } => {
            if needs[0] {
                let rows = node.tensor.shape()[0];
                let w = end - start;
                let cols = done[inputs[0].0].tensor.cols();
                let g = done[inputs[0].0].tensor.grad.as_mut().unwrap();
                for i in 0..rows {
                    for j in 0..w {
                        g[i * cols + start + j] += out_grad[i * w + j];
                    }
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs a scalar loss from the leaf holding `x`. Returns the
/// max over coordinates of `|analytic - central| / max(1, |central|)`.
pub fn grad_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::InvalidEps(eps));
    }
    let mut g = Graph::new();
    let id = g.leaf(x.clone().with_grad());
    let loss = build(&mut g, id)?;
    if !g.value(loss).is_scalar() {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: g.value(loss).shape().to_vec(),
        });
    }
    g.backward(loss)?;
    let analytic = g.grad(id).expect("leaf requires grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let id = g.leaf(t);
        let loss = build(&mut g, id)?;
        Ok(g.value(loss).scalar_value())
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{}", msg);
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{}", msg);
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[4, 7]));
            let y = g.softmax(x);
            for row in g.value(y).data().chunks(7) {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x * x), x = [3] -> grad 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_unused_input_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.leaf(Tensor::vector(vec![5.0]).with_grad());
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(y).unwrap(), &[10.0]);
    }

    #[test]
    fn backward_non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn gradient_accumulates_over_two_paths() {
        // loss = sum(x) + sum(x*x) at x=2 -> 1 + 2x = 5
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0]).with_grad());
        let s1 = g.sum(x);
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum(sq);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let b = g.constant(w.clone());
            let mm = g.matmul(a, b).unwrap();
            let act = g.gelu(mm);
            g.value(act).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_square_is_tight() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {}", err);
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_non_scalar() {
        let x = Tensor::vector(vec![1.0]);
        assert!(matches!(
            grad_check(|g, x| Ok(g.relu(x)), &x, 0.0),
            Err(TensorError::InvalidEps(_))
        ));
        let x2 = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|g, x| Ok(g.relu(x)), &x2, 1e-5),
            Err(TensorError::NotScalar { .. })
        ));
    }

    /// Per-op gradient checks at random points. The acceptance suite runs the
    /// same checks at 100+ points; this keeps a quick version near the code.
    #[test]
    fn grad_check_each_op() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..5 {
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w = rand_tensor(&mut rng, &[4, 3]);
            let cases: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>>)> = vec![
                ("relu", {
                    // shift away from 0 so the kink cannot bite
                    Box::new(|g, x| {
                        let y = g.relu(x);
                        Ok(g.sum(y))
                    })
                }),
                ("gelu", Box::new(|g, x| {
                    let y = g.gelu(x);
                    Ok(g.sum(y))
                })),
                ("sigmoid", Box::new(|g, x| {
                    let y = g.sigmoid(x);
                    Ok(g.sum(y))
                })),
                ("softplus", Box::new(|g, x| {
                    let y = g.softplus(x);
                    Ok(g.sum(y))
                })),
                ("softmax", Box::new(|g, x| {
                    let y = g.softmax(x);
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })),
                ("transpose", Box::new(|g, x| {
                    let y = g.transpose(x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })),
                ("reshape", Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 6])?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })),
                ("scale", Box::new(|g, x| {
                    let y = g.scale(x, -1.7);
                    Ok(g.sum(y))
                })),
                ("mean_pool", Box::new(|g, x| {
                    let y = g.mean_pool(x, &[true, false, true])?;
                    let y2 = g.reshape(y, &[1, 4])?;
                    let sq = g.mul(y2, y2)?;
                    Ok(g.sum(sq))
                })),
                ("matmul_lhs", {
                    let w = w.clone();
                    Box::new(move |g, x| {
                        let w = g.constant(w.clone());
                        let y = g.matmul(x, w)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    })
                }),
            ];
            for (name, build) in cases {
                let err = grad_check(&build, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "op {} trial {}: err {}", name, trial, err);
            }
        }
    }

    #[test]
    fn grad_check_layer_norm_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[2, 6]);
            let gamma = rand_tensor(&mut rng, &[6]);
            let beta = rand_tensor(&mut rng, &[6]);
            let (gm, bt) = (gamma.clone(), beta.clone());
            let err = grad_check(
                move |g, x| {
                    let gm = g.constant(gm.clone());
                    let bt = g.constant(bt.clone());
                    let y = g.layer_norm(x, gm, bt, 1e-5)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "layer_norm x-grad err {}", err);

            // gamma path
            let xc = x.clone();
            let bt = beta.clone();
            let err = grad_check(
                move |g, gamma| {
                    let x = g.constant(xc.clone());
                    let bt = g.constant(bt.clone());
                    let y = g.layer_norm(x, gamma, bt, 1e-5)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &gamma,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "layer_norm gamma-grad err {}", err);
        }
    }

    #[test]
    fn grad_check_embedding_and_concat() {
        let mut rng = StdRng::seed_from_u64(13);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let err = grad_check(
            |g, table| {
                let e = g.embedding(table, &[0, 2, 2, 4])?;
                let sq = g.mul(e, e)?;
                Ok(g.sum(sq))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "embedding err {}", err);

        let x = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(
            |g, x| {
                let y = g.concat_cols(&[x, x])?;
                let sm = g.softmax(y);
                let sq = g.mul(sm, sm)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "concat err {}", err);

        let err = grad_check(
            |g, x| {
                let y = g.slice_cols(x, 1, 3)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "slice err {}", err);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(matches!(
            g.embedding(table, &[0, 3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn broadcast_add_and_mul_grads() {
        let mut rng = StdRng::seed_from_u64(19);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let b2 = bias.clone();
        let err = grad_check(
            move |g, x| {
                let b = g.constant(b2.clone());
                let y = g.add(x, b)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);

        let xc = x.clone();
        let err = grad_check(
            move |g, bias| {
                let x = g.constant(xc.clone());
                let y = g.add(x, bias)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);

        let col = rand_tensor(&mut rng, &[3, 1]);
        let xc = x.clone();
        let err = grad_check(
            move |g, col| {
                let x = g.constant(xc.clone());
                let y = g.mul(x, col)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &col,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn finite_outputs_on_extreme_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-700.0, 0.0, 700.0]));
        let sm = g.softmax(x);
        let sp = g.softplus(x);
        let sg = g.sigmoid(x);
        assert!(g.value(sm).all_finite());
        assert!(g.value(sp).all_finite());
        assert!(g.value(sg).all_finite());
    }
}
