//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records one forward computation; nodes are appended in
//! topological order, so the backward sweep is a single reverse pass that
//! visits each node exactly once. Graphs are rebuilt per forward pass, which
//! keeps attribution (many passes at scaled attention) simple: every pass
//! owns its tape, and attention matrices enter the tape as ordinary leaves
//! that can be read back or substituted with externally supplied values.
//!
//! A graph is confined to one thread; independent graphs may run in parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier of a node within one [`Graph`]. Ids are dense indices and are
/// only meaningful on the graph that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    Matmul,
    Transpose,
    SoftmaxRows { scale: f64 },
    ConcatRows,
    SliceRows { start: usize, end: usize },
    ReduceSum,
    ReduceMean,
    Relu,
    LayerNorm { eps: f64 },
    AddRowBroadcast,
    MulRowBroadcast,
    EmbeddingLookup { ids: Vec<usize> },
    CrossEntropy { targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient map produced by [`Graph::backward`]. Nodes with no path to the
/// loss hold an all-zero tensor of their value's shape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

/// One recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register an input tensor. `requires_grad` marks it for gradient
    /// output; this is how parameters and attention overrides enter the tape.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Register a constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value, false)
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor, leaf_rg: bool) -> NodeId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires_grad = leaf_rg || parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value, false))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "elementwise_mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value, false))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(x).scale_by(c);
        Ok(self.push(Op::Scale(c), vec![x], value, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], value, false))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = super::transpose(self.value(x))?;
        Ok(self.push(Op::Transpose, vec![x], value, false))
    }

    /// Row-wise softmax of `scale * x`, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is_2d() || t.rows() == 0 {
            return Err(Error::Contract(format!(
                "softmax_rows expects a non-empty 2-d tensor, got shape {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() || !scale.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
            let mut denom = 0.0;
            for j in 0..n {
                let e = (scale * row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::SoftmaxRows { scale }, vec![x], value, false))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_2d() || !tb.is_2d() || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let rows = ta.rows() + tb.rows();
        let mut data = Vec::with_capacity(rows * ta.cols());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![rows, ta.cols()], data)?;
        Ok(self.push(Op::ConcatRows, vec![a, b], value, false))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is_2d() || start >= end || end > t.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let n = t.cols();
        let data = t.data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(Op::SliceRows { start, end }, vec![x], value, false))
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Op::ReduceSum, vec![x], Tensor::scalar(s), false))
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::EmptyInput("reduce_mean of empty tensor"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Op::ReduceMean, vec![x], Tensor::scalar(s), false))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu, vec![x], value, false))
    }

    /// Row-wise normalization to zero mean and unit variance. Affine gain and
    /// bias are applied separately via the row-broadcast ops.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is_2d() || t.cols() == 0 {
            return Err(Error::Contract(format!(
                "layer_norm expects a non-empty 2-d tensor, got shape {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x], value, false))
    }

    /// Add a `[1, n]` row vector to every row of a `[m, n]` tensor.
    pub fn add_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (tx, tv) = (self.value(x), self.value(v));
        if !tx.is_2d() || tv.shape() != [1, tx.cols()] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: tx.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tv.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::AddRowBroadcast, vec![x, v], value, false))
    }

    /// Multiply every row of a `[m, n]` tensor by a `[1, n]` row vector.
    pub fn mul_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (tx, tv) = (self.value(x), self.value(v));
        if !tx.is_2d() || tv.shape() != [1, tx.cols()] {
            return Err(Error::ShapeMismatch {
                op: "mul_row_broadcast",
                left: tx.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= tv.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MulRowBroadcast, vec![x, v], value, false))
    }

    /// Gather rows of an embedding table. `ids` are not differentiable; the
    /// gradient accumulates into the table rows.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if !t.is_2d() {
            return Err(Error::Contract(format!(
                "embedding_lookup expects a 2-d table, got shape {:?}",
                t.shape()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * n..(id + 1) * n]);
        }
        let value = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(
            Op::EmbeddingLookup { ids: ids.to_vec() },
            vec![table],
            value,
            false,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// the logits, computed via log-sum-exp.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if !t.is_2d() || t.rows() != targets.len() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} logit rows vs {} targets",
                if t.is_2d() { t.rows() } else { 0 },
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= t.cols()) {
            return Err(Error::Contract(format!(
                "cross_entropy: target class {bad} out of range for {} classes",
                t.cols()
            )));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut loss = 0.0;
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let value = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            vec![logits],
            value,
            false,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Every node receives a gradient
    /// tensor; nodes with no path to the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(self.value(loss).map(|_| 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.accumulate_parents(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape().to_vec())))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let parent_value = |k: usize| &self.nodes[node.parents[k].0].value;
        let mut add_to = |k: usize, delta: Tensor| {
            let pid = node.parents[k].0;
            if !self.nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(0, gy.clone());
                add_to(1, gy.clone());
            }
            Op::Mul => {
                let (a, b) = (parent_value(0), parent_value(1));
                add_to(0, elementwise(gy, b));
                add_to(1, elementwise(gy, a));
            }
            Op::Scale(c) => add_to(0, gy.scale_by(*c)),
            Op::Matmul => {
                let (a, b) = (parent_value(0), parent_value(1));
                let bt = super::transpose(b).expect("checked in forward");
                let at = super::transpose(a).expect("checked in forward");
                add_to(0, super::matmul(gy, &bt).expect("shapes agree"));
                add_to(1, super::matmul(&at, gy).expect("shapes agree"));
            }
            Op::Transpose => add_to(0, super::transpose(gy).expect("2-d")),
            Op::SoftmaxRows { scale } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &gy.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = scale * yr[j] * (gr[j] - dot);
                    }
                }
                add_to(0, Tensor::new(vec![m, n], dx).expect("shape"));
            }
            Op::ConcatRows => {
                let ra = parent_value(0).rows();
                let n = parent_value(0).cols();
                let (top, bottom) = gy.data().split_at(ra * n);
                add_to(0, Tensor::new(vec![ra, n], top.to_vec()).expect("shape"));
                add_to(
                    1,
                    Tensor::new(vec![gy.rows() - ra, n], bottom.to_vec()).expect("shape"),
                );
            }
            Op::SliceRows { start, end } => {
                let x = parent_value(0);
                let n = x.cols();
                let mut dx = Tensor::zeros(x.shape().to_vec());
                dx.data_mut()[start * n..end * n].copy_from_slice(gy.data());
                add_to(0, dx);
            }
            Op::ReduceSum => {
                let g = gy.item();
                add_to(0, parent_value(0).map(|_| g));
            }
            Op::ReduceMean => {
                let g = gy.item() / parent_value(0).numel() as f64;
                add_to(0, parent_value(0).map(|_| g));
            }
            Op::Relu => {
                let x = parent_value(0);
                let data = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                add_to(0, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::LayerNorm { eps } => {
                let x = parent_value(0);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &x.data()[i * n..(i + 1) * n];
                    let gr = &gy.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gx_mean = gr.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv * (gr[j] - g_mean - xhat[j] * gx_mean);
                    }
                }
                add_to(0, Tensor::new(vec![m, n], dx).expect("shape"));
            }
            Op::AddRowBroadcast => {
                add_to(0, gy.clone());
                let (m, n) = (gy.rows(), gy.cols());
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += gy.data()[i * n + j];
                    }
                }
                add_to(1, Tensor::new(vec![1, n], dv).expect("shape"));
            }
            Op::MulRowBroadcast => {
                let (x, v) = (parent_value(0), parent_value(1));
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0; m * n];
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gy.data()[i * n + j] * v.data()[j];
                        dv[j] += gy.data()[i * n + j] * x.data()[i * n + j];
                    }
                }
                add_to(0, Tensor::new(vec![m, n], dx).expect("shape"));
                add_to(1, Tensor::new(vec![1, n], dv).expect("shape"));
            }
            Op::EmbeddingLookup { ids } => {
                let table = parent_value(0);
                let n = table.cols();
                let mut dt = Tensor::zeros(table.shape().to_vec());
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt.data_mut()[id * n + j] += gy.data()[k * n + j];
                    }
                }
                add_to(0, dt);
            }
            Op::CrossEntropy { targets } => {
                let logits = parent_value(0);
                let (m, n) = (logits.rows(), logits.cols());
                let g = gy.item() / m as f64;
                let mut dl = vec![0.0; m * n];
                for i in 0..m {
                    let row = &logits.data()[i * n..(i + 1) * n];
                    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - mx).exp() / denom;
                        let y = if targets[i] == j { 1.0 } else { 0.0 };
                        dl[i * n + j] = (p - y) * g;
                    }
                }
                add_to(0, Tensor::new(vec![m, n], dl).expect("shape"));
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
