//! Minimal reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes; [`Graph::backward`]
//! walks it in reverse and accumulates gradients into every node. All
//! arithmetic is f64.

use crate::S2pError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// a[m x n] + b[1 x n]
    AddRow(NodeId, NodeId),
    /// a[m x n] + b[m x 1]
    AddCol(NodeId, NodeId),
    /// a[m x n] * b[1 x n], elementwise with row broadcast
    MulRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    /// Per-row standardization (mean 0, variance 1); gain/bias are separate ops.
    LayerNormRows(NodeId, f64),
    /// x[in_ch x len] convolved with w[out_ch x in_ch*k], valid padding.
    Conv1d { x: NodeId, w: NodeId, in_ch: usize, kernel: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectRow(NodeId, usize),
    SliceRows(NodeId, usize),
    /// Mean Bernoulli negative log-likelihood of probabilities against fixed labels.
    BceMean(NodeId, Vec<f64>),
    /// Mean of scalar nodes.
    MeanStack(Vec<NodeId>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LOG_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node { op, rows, cols, values, grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, rows, cols, values)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (m, n) = self.shape(a);
        let v = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), m, n, v)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "row bias shape mismatch");
        let mut v = self.nodes[a.0].values.clone();
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] += self.nodes[b.0].values[j];
            }
        }
        self.push(Op::AddRow(a, b), m, n, v)
    }

    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, 1), "column bias shape mismatch");
        let mut v = self.nodes[a.0].values.clone();
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] += self.nodes[b.0].values[i];
            }
        }
        self.push(Op::AddCol(a, b), m, n, v)
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "row gain shape mismatch");
        let mut v = self.nodes[a.0].values.clone();
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] *= self.nodes[b.0].values[j];
            }
        }
        self.push(Op::MulRow(a, b), m, n, v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut v = vec![0.0; m * n];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let out = &mut v[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += x * brow[j];
                }
            }
        }
        self.push(Op::Matmul(a, b), m, n, v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = av[i * n + j];
            }
        }
        self.push(Op::Transpose(a), n, m, v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), m, n, v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a.0].values.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(Op::Sigmoid(a), m, n, v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a.0].values.iter().map(|&x| c * x).collect();
        self.push(Op::Scale(a, c), m, n, v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                v[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                v[i * n + j] /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), m, n, v)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                v[i * n + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a, eps), m, n, v)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, kernel: usize) -> NodeId {
        let (in_ch, len) = self.shape(x);
        let (out_ch, wk) = self.shape(w);
        assert_eq!(wk, in_ch * kernel, "conv weight shape mismatch");
        assert!(len >= kernel, "sequence shorter than kernel");
        let out_len = len - kernel + 1;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut v = vec![0.0; out_ch * out_len];
        for o in 0..out_ch {
            for t in 0..out_len {
                let mut acc = 0.0;
                for c in 0..in_ch {
                    for j in 0..kernel {
                        acc += xv[c * len + t + j] * wv[o * wk + c * kernel + j];
                    }
                }
                v[o * out_len + t] = acc;
            }
        }
        self.push(Op::Conv1d { x, w, in_ch, kernel }, out_ch, out_len, v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (m, n) = self.shape(p);
            assert_eq!(n, cols, "concat_rows column mismatch");
            rows += m;
            v.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, cols, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (m, n) = self.shape(p);
            assert_eq!(m, rows, "concat_cols row mismatch");
            for i in 0..m {
                for j in 0..n {
                    v[i * cols + offset + j] = self.nodes[p.0].values[i * n + j];
                }
            }
            offset += n;
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols, v)
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(row < m, "row index out of range");
        let v = self.nodes[a.0].values[row * n..(row + 1) * n].to_vec();
        self.push(Op::SelectRow(a, row), 1, n, v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "row slice out of range");
        let v = self.nodes[a.0].values[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows(a, start), len, n, v)
    }

    /// Mean Bernoulli NLL; `labels` must be 0/1 and match the shape of `p`.
    pub fn bce_mean(&mut self, p: NodeId, labels: Vec<f64>) -> NodeId {
        let (m, n) = self.shape(p);
        assert_eq!(labels.len(), m * n, "label shape mismatch");
        let pv = &self.nodes[p.0].values;
        let total: f64 = pv
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                -(y * p.max(LOG_EPS).ln() + (1.0 - y) * (1.0 - p).max(LOG_EPS).ln())
            })
            .sum();
        let v = vec![total / labels.len() as f64];
        self.push(Op::BceMean(p, labels), 1, 1, v)
    }

    pub fn mean_stack(&mut self, parts: &[NodeId]) -> NodeId {
        for &p in parts {
            assert_eq!(self.shape(p), (1, 1), "mean_stack expects scalars");
        }
        let v = vec![parts.iter().map(|&p| self.nodes[p.0].values[0]).sum::<f64>()
            / parts.len() as f64];
        self.push(Op::MeanStack(parts.to_vec()), 1, 1, v)
    }

    /// Seeds the output gradient with 1 and accumulates gradients into
    /// every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), S2pError> {
        if self.shape(loss) != (1, 1) {
            return Err(S2pError::State("backward expects a scalar loss node".into()));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            // take the gradient out so we can mutate parents
            let grad = std::mem::take(&mut self.nodes[idx].grad);
            let op = self.nodes[idx].op.clone();
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            match &op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (i, g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g;
                        self.nodes[b.0].grad[i] += g;
                    }
                }
                Op::AddRow(a, b) => {
                    for i in 0..rows {
                        for j in 0..cols {
                            let g = grad[i * cols + j];
                            self.nodes[a.0].grad[i * cols + j] += g;
                            self.nodes[b.0].grad[j] += g;
                        }
                    }
                }
                Op::AddCol(a, b) => {
                    for i in 0..rows {
                        for j in 0..cols {
                            let g = grad[i * cols + j];
                            self.nodes[a.0].grad[i * cols + j] += g;
                            self.nodes[b.0].grad[i] += g;
                        }
                    }
                }
                Op::MulRow(a, b) => {
                    for i in 0..rows {
                        for j in 0..cols {
                            let g = grad[i * cols + j];
                            let av = self.nodes[a.0].values[i * cols + j];
                            let bv = self.nodes[b.0].values[j];
                            self.nodes[a.0].grad[i * cols + j] += g * bv;
                            self.nodes[b.0].grad[j] += g * av;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grad[i * n + j] * self.nodes[b.0].values[p * n + j];
                            }
                            self.nodes[a.0].grad[i * k + p] += acc;
                        }
                    }
                    // dB = A^T * dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += self.nodes[a.0].values[i * k + p] * grad[i * n + j];
                            }
                            self.nodes[b.0].grad[p * n + j] += acc;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (am, an) = self.shape(*a);
                    for i in 0..am {
                        for j in 0..an {
                            self.nodes[a.0].grad[i * an + j] += grad[j * am + i];
                        }
                    }
                }
                Op::Relu(a) => {
                    for (i, g) in grad.iter().enumerate() {
                        if self.nodes[a.0].values[i] > 0.0 {
                            self.nodes[a.0].grad[i] += g;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for (i, g) in grad.iter().enumerate() {
                        let y = self.nodes[idx].values[i];
                        self.nodes[a.0].grad[i] += g * y * (1.0 - y);
                    }
                }
                Op::Scale(a, c) => {
                    for (i, g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g * c;
                    }
                }
                Op::SoftmaxRows(a) => {
                    for i in 0..rows {
                        let y = self.nodes[idx].values[i * cols..(i + 1) * cols].to_vec();
                        let gy = &grad[i * cols..(i + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            self.nodes[a.0].grad[i * cols + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows(a, eps) => {
                    let n = cols as f64;
                    for i in 0..rows {
                        let x = &self.nodes[a.0].values[i * cols..(i + 1) * cols];
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = self.nodes[idx].values[i * cols..(i + 1) * cols].to_vec();
                        let gy = &grad[i * cols..(i + 1) * cols];
                        let mean_gy: f64 = gy.iter().sum::<f64>() / n;
                        let mean_gy_y: f64 =
                            gy.iter().zip(&y).map(|(g, y)| g * y).sum::<f64>() / n;
                        for j in 0..cols {
                            self.nodes[a.0].grad[i * cols + j] +=
                                inv * (gy[j] - mean_gy - y[j] * mean_gy_y);
                        }
                    }
                }
                Op::Conv1d { x, w, in_ch, kernel } => {
                    let (_, len) = self.shape(*x);
                    let wk = in_ch * kernel;
                    let out_len = cols;
                    for o in 0..rows {
                        for t in 0..out_len {
                            let g = grad[o * out_len + t];
                            if g == 0.0 {
                                continue;
                            }
                            for c in 0..*in_ch {
                                for j in 0..*kernel {
                                    self.nodes[x.0].grad[c * len + t + j] +=
                                        g * self.nodes[w.0].values[o * wk + c * kernel + j];
                                    self.nodes[w.0].grad[o * wk + c * kernel + j] +=
                                        g * self.nodes[x.0].values[c * len + t + j];
                                }
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        for i in 0..m * n {
                            self.nodes[p.0].grad[i] += grad[offset + i];
                        }
                        offset += m * n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col0 = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        for i in 0..m {
                            for j in 0..n {
                                self.nodes[p.0].grad[i * n + j] += grad[i * cols + col0 + j];
                            }
                        }
                        col0 += n;
                    }
                }
                Op::SelectRow(a, row) => {
                    let (_, n) = self.shape(*a);
                    for (j, g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[row * n + j] += g;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (_, n) = self.shape(*a);
                    for i in 0..rows {
                        for j in 0..n {
                            self.nodes[a.0].grad[(start + i) * n + j] += grad[i * n + j];
                        }
                    }
                }
                Op::BceMean(p, labels) => {
                    let g = grad[0] / labels.len() as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        let pv = self.nodes[p.0].values[i];
                        let dp = if y > 0.5 {
                            -1.0 / pv.max(LOG_EPS)
                        } else {
                            1.0 / (1.0 - pv).max(LOG_EPS)
                        };
                        self.nodes[p.0].grad[i] += g * dp;
                    }
                }
                Op::MeanStack(parts) => {
                    let g = grad[0] / parts.len() as f64;
                    for &p in parts {
                        self.nodes[p.0].grad[0] += g;
                    }
                }
            }
            // restore the gradient taken at the top of the iteration
            self.nodes[idx].grad = grad;
        }
        Ok(())
    }
}
