//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes to a [`Tape`]; inputs always precede outputs,
//! so the tape order is already topological and [`Tape::backward`] is a
//! single reverse sweep. One tape lives for one training step.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_into, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Row distance kind used by the metric ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    L1,
    L2,
}

/// Logit written on masked diagonal entries of a pairwise-metric output.
/// Large enough that exp(x - max) underflows to zero in logsumexp.
pub const MASKED_LOGIT: f64 = -1.0e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// out[i][j] = a[i][j] + bias[j]
    AddRowBroadcast(NodeId, NodeId),
    /// out[i][j] = a[i][j] + v[i]
    AddColBroadcast(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    Ln(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    /// out[i][j] = a[i][j] / v[i]
    DivRowBroadcast(NodeId, NodeId),
    /// out[i][j] = a[i][j] / v[j]
    DivColBroadcast(NodeId, NodeId),
    /// Per-row distance between paired rows of two equal-shape matrices.
    ElementwiseMetric(NodeId, NodeId, Metric),
    /// out[i][j] = scale * delta(a_i, b_j); masked diagonal optional.
    PairwiseMetric {
        a: NodeId,
        b: NodeId,
        metric: Metric,
        scale: f64,
        exclude_diag: bool,
    },
    LogsumexpRows(NodeId),
    Logsumexp(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// -sum x ln x over all entries, with 0 ln 0 = 0.
    EntropySum(NodeId),
    /// out[i][j] = a[perm[j*n + i]][j]; independent row shuffle per column.
    ShuffleRowsPerColumn(NodeId, Arc<Vec<usize>>),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations for later gradient replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a tape leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let rg = t.requires_grad;
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Insert a tensor as a constant (never receives gradient).
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.rg(a) || self.rg(b)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::shape(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), self.rg2(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg2(a, b)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul_elem")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulElem(a, b), self.rg2(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Scale(a, c), self.rg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::AddScalar(a), self.rg(a))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if self.value(bias).numel() != m {
            return Err(CoreError::shape(format!(
                "add_row_broadcast: bias len {} vs cols {}",
                self.value(bias).numel(),
                m
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += b[j];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBroadcast(a, bias), self.rg2(a, bias)))
    }

    pub fn add_col_broadcast(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if self.value(v).numel() != n {
            return Err(CoreError::shape(format!(
                "add_col_broadcast: vec len {} vs rows {}",
                self.value(v).numel(),
                n
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let vv = self.value(v).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += vv[i];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddColBroadcast(a, v), self.rg2(a, v)))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(CoreError::shape(format!(
                "matmul {}x{} . {}x{}",
                m, k, k2, n
            )));
        }
        let mut data = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Matmul(a, b), self.rg2(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), self.rg(a))
    }

    // ── nonlinearities ───────────────────────────────────────────────

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::LeakyRelu(a, slope), self.rg(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Sigmoid(a), self.rg(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Clamp(a, lo, hi), self.rg(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Ln(a), self.rg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Exp(a), self.rg(a))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), self.rg(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let d = self.value(a).data();
        let out: Vec<f64> = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSum(a), self.rg(a))
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let d = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += d[i * m + j];
            }
        }
        self.push(Tensor::vector(out), Op::ColSum(a), self.rg(a))
    }

    pub fn div_row_broadcast(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if self.value(v).numel() != n {
            return Err(CoreError::shape(format!(
                "div_row_broadcast: vec len {} vs rows {}",
                self.value(v).numel(),
                n
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let vv = self.value(v).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] /= vv[i];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::DivRowBroadcast(a, v), self.rg2(a, v)))
    }

    pub fn div_col_broadcast(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if self.value(v).numel() != m {
            return Err(CoreError::shape(format!(
                "div_col_broadcast: vec len {} vs cols {}",
                self.value(v).numel(),
                m
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let vv = self.value(v).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] /= vv[j];
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::DivColBroadcast(a, v), self.rg2(a, v)))
    }

    // ── metrics and contrastive building blocks ──────────────────────

    /// Per-row l1 or l2 distance between paired rows; output length = rows.
    pub fn elementwise_metric(&mut self, a: NodeId, b: NodeId, metric: Metric) -> Result<NodeId> {
        self.same_shape(a, b, "elementwise_metric")?;
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n)
            .map(|i| row_metric(&da[i * m..(i + 1) * m], &db[i * m..(i + 1) * m], metric))
            .collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::ElementwiseMetric(a, b, metric),
            self.rg2(a, b),
        ))
    }

    /// Scaled distance between every row of `a` and every row of `b`.
    ///
    /// With `exclude_diag`, entries (i, i) are set to [`MASKED_LOGIT`] and
    /// receive no gradient; used for in-batch negatives where a row must
    /// not be contrasted against itself.
    pub fn pairwise_metric(
        &mut self,
        a: NodeId,
        b: NodeId,
        metric: Metric,
        scale: f64,
        exclude_diag: bool,
    ) -> Result<NodeId> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let (m, d2) = (self.value(b).rows(), self.value(b).cols());
        if d != d2 {
            return Err(CoreError::shape(format!(
                "pairwise_metric: widths {} vs {}",
                d, d2
            )));
        }
        if exclude_diag && n != m {
            return Err(CoreError::shape(
                "pairwise_metric: exclude_diag needs square output".to_string(),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        pairwise_into(da, db, &mut out, n, m, d, metric, scale, exclude_diag);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            t,
            Op::PairwiseMetric {
                a,
                b,
                metric,
                scale,
                exclude_diag,
            },
            self.rg2(a, b),
        ))
    }

    /// Row-wise log-sum-exp with max-shift; output length = rows.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let d = self.value(a).data();
        let out: Vec<f64> = (0..n).map(|i| logsumexp_slice(&d[i * m..(i + 1) * m])).collect();
        self.push(Tensor::vector(out), Op::LogsumexpRows(a), self.rg(a))
    }

    /// log sum exp over all entries, max-shifted.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = logsumexp_slice(self.value(a).data());
        self.push(Tensor::scalar(v), Op::Logsumexp(a), self.rg(a))
    }

    // ── shape surgery ────────────────────────────────────────────────

    /// Concatenate 2-D tensors (or vectors, treated as n x 1) column-wise.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_cols: no inputs".to_string()));
        }
        let n = self.col_block_rows(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.col_block_rows(p) != n {
                return Err(CoreError::shape(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    n,
                    self.col_block_rows(p)
                )));
            }
            widths.push(self.col_block_cols(p));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data();
            for i in 0..n {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![n, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column slice [start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if start > end || end > m {
            return Err(CoreError::shape(format!(
                "slice_cols: [{}, {}) of width {}",
                start, end, m
            )));
        }
        let w = end - start;
        let d = self.value(a).data();
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            data[i * w..(i + 1) * w].copy_from_slice(&d[i * m + start..i * m + end]);
        }
        let t = Tensor::new(vec![n, w], data)?;
        Ok(self.push(t, Op::SliceCols(a, start, end), self.rg(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(CoreError::shape(format!(
                "reshape: {:?} -> {:?}",
                self.value(a).shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.rg(a)))
    }

    /// -sum x ln x over all entries, defining 0 ln 0 = 0.
    pub fn entropy_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
            .sum();
        self.push(Tensor::scalar(s), Op::EntropySum(a), self.rg(a))
    }

    /// Shuffle rows independently within each column. `perms` holds one
    /// source-row permutation per column, laid out column-major.
    pub fn shuffle_rows_per_column(&mut self, a: NodeId, perms: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if perms.len() != n * m {
            return Err(CoreError::shape(format!(
                "shuffle_rows_per_column: perm len {} vs {}x{}",
                perms.len(),
                n,
                m
            )));
        }
        let d = self.value(a).data();
        let mut data = vec![0.0; n * m];
        for j in 0..m {
            let col = &perms[j * n..(j + 1) * n];
            for i in 0..n {
                data[i * m + j] = d[col[i] * m + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::ShuffleRowsPerColumn(a, perms), self.rg(a)))
    }

    fn col_block_rows(&self, id: NodeId) -> usize {
        let v = self.value(id);
        if v.shape().len() == 1 {
            v.numel()
        } else {
            v.rows()
        }
    }

    fn col_block_cols(&self, id: NodeId) -> usize {
        let v = self.value(id);
        if v.shape().len() == 1 {
            1
        } else {
            v.cols()
        }
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; every requires-grad leaf ends up
    /// holding d(root)/d(leaf).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(CoreError::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_step(id);
        }
        Ok(())
    }

    fn backward_step(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let g = node.grad.as_deref().expect("grad present");
        let out_val = &node.value;

        // Collected as (target, contribution) and applied afterwards so the
        // read phase never aliases the write phase.
        let mut contribs: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let needs = |id: NodeId| before[id.0].requires_grad;
        let val = |id: NodeId| -> &Tensor { &before[id.0].value };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    contribs.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    contribs.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::MulElem(a, b) => {
                if needs(*a) {
                    contribs.push((*a, zip_map(g, val(*b).data(), |x, y| x * y)));
                }
                if needs(*b) {
                    contribs.push((*b, zip_map(g, val(*a).data(), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    contribs.push((*a, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                let (n, m) = (val(*a).rows(), val(*a).cols());
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if needs(*bias) {
                    let mut gb = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g[i * m + j];
                        }
                    }
                    contribs.push((*bias, gb));
                }
            }
            Op::AddColBroadcast(a, v) => {
                let (n, m) = (val(*a).rows(), val(*a).cols());
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if needs(*v) {
                    let gv: Vec<f64> = (0..n).map(|i| g[i * m..(i + 1) * m].iter().sum()).collect();
                    contribs.push((*v, gv));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if needs(*a) {
                    // dA = G . B^T
                    let bt = val(*b).transpose();
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut ga, m, n, k);
                    contribs.push((*a, ga));
                }
                if needs(*b) {
                    // dB = A^T . G
                    let at = val(*a).transpose();
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut gb, k, m, n);
                    contribs.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (val(*a).rows(), val(*a).cols());
                    let mut ga = vec![0.0; r * c];
                    // out is c x r
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] = g[i * r + j];
                        }
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let ga = zip_map(g, val(*a).data(), |gi, x| {
                        if x > 0.0 {
                            gi
                        } else {
                            gi * slope
                        }
                    });
                    contribs.push((*a, ga));
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let ga = zip_map(g, out_val.data(), |gi, s| gi * s * (1.0 - s));
                    contribs.push((*a, ga));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(*a) {
                    let ga = zip_map(g, val(*a).data(), |gi, x| {
                        if x >= *lo && x <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    contribs.push((*a, ga));
                }
            }
            Op::Ln(a) => {
                if needs(*a) {
                    let ga = zip_map(g, val(*a).data(), |gi, x| gi / x);
                    contribs.push((*a, ga));
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let ga = zip_map(g, out_val.data(), |gi, e| gi * e);
                    contribs.push((*a, ga));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    contribs.push((*a, vec![g[0]; val(*a).numel()]));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = val(*a).numel();
                    contribs.push((*a, vec![g[0] / n as f64; n]));
                }
            }
            Op::RowSum(a) => {
                if needs(*a) {
                    let (n, m) = (val(*a).rows(), val(*a).cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[i];
                        }
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::ColSum(a) => {
                if needs(*a) {
                    let (n, m) = (val(*a).rows(), val(*a).cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[j];
                        }
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::DivRowBroadcast(a, v) => {
                let (n, m) = (val(*a).rows(), val(*a).cols());
                let vv = val(*v).data();
                if needs(*a) {
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[i * m + j] / vv[i];
                        }
                    }
                    contribs.push((*a, ga));
                }
                if needs(*v) {
                    let out = out_val.data();
                    let mut gv = vec![0.0; n];
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * out[i * m + j];
                        }
                        gv[i] = -s / vv[i];
                    }
                    contribs.push((*v, gv));
                }
            }
            Op::DivColBroadcast(a, v) => {
                let (n, m) = (val(*a).rows(), val(*a).cols());
                let vv = val(*v).data();
                if needs(*a) {
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[i * m + j] / vv[j];
                        }
                    }
                    contribs.push((*a, ga));
                }
                if needs(*v) {
                    let out = out_val.data();
                    let mut gv = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gv[j] -= g[i * m + j] * out[i * m + j] / vv[j];
                        }
                    }
                    contribs.push((*v, gv));
                }
            }
            Op::ElementwiseMetric(a, b, metric) => {
                let (n, m) = (val(*a).rows(), val(*a).cols());
                let (da, db) = (val(*a).data(), val(*b).data());
                let out = out_val.data();
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        let diff = da[i * m + j] - db[i * m + j];
                        let d = match metric {
                            Metric::L1 => sgn(diff),
                            Metric::L2 => {
                                if out[i] > 0.0 {
                                    diff / out[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[i * m + j] = g[i] * d;
                    }
                }
                if needs(*a) {
                    contribs.push((*a, ga.clone()));
                }
                if needs(*b) {
                    contribs.push((*b, ga.iter().map(|x| -x).collect()));
                }
            }
            Op::PairwiseMetric {
                a,
                b,
                metric,
                scale,
                exclude_diag,
            } => {
                let (n, d) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                let (da, db) = (val(*a).data(), val(*b).data());
                let out = out_val.data();
                let need_a = needs(*a);
                let need_b = needs(*b);
                let mut ga = vec![0.0; if need_a { n * d } else { 0 }];
                let mut gb = vec![0.0; if need_b { m * d } else { 0 }];
                pairwise_backward(
                    da, db, out, g, &mut ga, &mut gb, n, m, d, *metric, *scale, *exclude_diag,
                    need_a, need_b,
                );
                if need_a {
                    contribs.push((*a, ga));
                }
                if need_b {
                    contribs.push((*b, gb));
                }
            }
            Op::LogsumexpRows(a) => {
                if needs(*a) {
                    let (n, m) = (val(*a).rows(), val(*a).cols());
                    let d = val(*a).data();
                    let out = out_val.data();
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[i] * (d[i * m + j] - out[i]).exp();
                        }
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::Logsumexp(a) => {
                if needs(*a) {
                    let d = val(*a).data();
                    let lse = out_val.item();
                    let ga = d.iter().map(|&x| g[0] * (x - lse).exp()).collect();
                    contribs.push((*a, ga));
                }
            }
            Op::ConcatCols(parts) => {
                let n = out_val.rows();
                let total = out_val.cols();
                let mut off = 0;
                for &p in parts {
                    let w = if before[p.0].value.shape().len() == 1 {
                        1
                    } else {
                        before[p.0].value.cols()
                    };
                    if before[p.0].requires_grad {
                        let mut gp = vec![0.0; n * w];
                        for i in 0..n {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        contribs.push((p, gp));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                if needs(*a) {
                    let (n, m) = (val(*a).rows(), val(*a).cols());
                    let w = end - start;
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        ga[i * m + start..i * m + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::EntropySum(a) => {
                if needs(*a) {
                    let ga = val(*a)
                        .data()
                        .iter()
                        .map(|&x| if x > 0.0 { -g[0] * (x.ln() + 1.0) } else { 0.0 })
                        .collect();
                    contribs.push((*a, ga));
                }
            }
            Op::ShuffleRowsPerColumn(a, perms) => {
                if needs(*a) {
                    let (n, m) = (val(*a).rows(), val(*a).cols());
                    let mut ga = vec![0.0; n * m];
                    for j in 0..m {
                        let col = &perms[j * n..(j + 1) * n];
                        for i in 0..n {
                            ga[col[i] * m + j] += g[i * m + j];
                        }
                    }
                    contribs.push((*a, ga));
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    contribs.push((*a, g.to_vec()));
                }
            }
        }

        for (target, c) in contribs {
            let tnode = &mut before[target.0];
            match tnode.grad.as_mut() {
                Some(acc) => {
                    for (av, cv) in acc.iter_mut().zip(c.iter()) {
                        *av += cv;
                    }
                }
                None => tnode.grad = Some(c),
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Subgradient of |x| with the symmetric choice sgn(0) = 0.
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_metric(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Metric::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

#[allow(clippy::too_many_arguments)]
fn pairwise_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    _n: usize,
    m: usize,
    d: usize,
    metric: Metric,
    scale: f64,
    exclude_diag: bool,
) {
    use rayon::prelude::*;
    out.par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, out_row)| {
            let ai = &a[i * d..(i + 1) * d];
            for (j, o) in out_row.iter_mut().enumerate() {
                if exclude_diag && i == j {
                    *o = MASKED_LOGIT;
                } else {
                    *o = scale * row_metric(ai, &b[j * d..(j + 1) * d], metric);
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
fn pairwise_backward(
    a: &[f64],
    b: &[f64],
    out: &[f64],
    g: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
    n: usize,
    m: usize,
    d: usize,
    metric: Metric,
    scale: f64,
    exclude_diag: bool,
    need_a: bool,
    need_b: bool,
) {
    use rayon::prelude::*;
    if need_a {
        ga.par_chunks_mut(d).enumerate().for_each(|(i, ga_row)| {
            let ai = &a[i * d..(i + 1) * d];
            for j in 0..m {
                if exclude_diag && i == j {
                    continue;
                }
                let gij = g[i * m + j];
                if gij == 0.0 {
                    continue;
                }
                let bj = &b[j * d..(j + 1) * d];
                let dist = out[i * m + j] / scale;
                for k in 0..d {
                    let diff = ai[k] - bj[k];
                    let dd = match metric {
                        Metric::L1 => sgn(diff),
                        Metric::L2 => {
                            if dist > 0.0 {
                                diff / dist
                            } else {
                                0.0
                            }
                        }
                    };
                    ga_row[k] += gij * scale * dd;
                }
            }
        });
    }
    if need_b {
        gb.par_chunks_mut(d).enumerate().for_each(|(j, gb_row)| {
            let bj = &b[j * d..(j + 1) * d];
            for i in 0..n {
                if exclude_diag && i == j {
                    continue;
                }
                let gij = g[i * m + j];
                if gij == 0.0 {
                    continue;
                }
                let ai = &a[i * d..(i + 1) * d];
                let dist = out[i * m + j] / scale;
                for k in 0..d {
                    let diff = ai[k] - bj[k];
                    let dd = match metric {
                        Metric::L1 => sgn(diff),
                        Metric::L2 => {
                            if dist > 0.0 {
                                diff / dist
                            } else {
                                0.0
                            }
                        }
                    };
                    gb_row[k] -= gij * scale * dd;
                }
            }
        });
    }
}

fn logsumexp_slice(x: &[f64]) -> f64 {
    let mx = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = x.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}
