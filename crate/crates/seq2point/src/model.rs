//! Network definition and forward pass.
//!
//! Input windows are W timesteps of F features. Each feature gets its
//! own two-layer convolutional encoder (valid padding, so the sequence
//! shortens by 2*(kernel-1)); the encoders' channels are concatenated,
//! projected to the model width, offset position embeddings are added,
//! and one or more attention blocks (multi-head self-attention with
//! residual + layer norm, then a position-wise FFN with residual +
//! layer norm) refine the sequence. The representation at the position
//! aligned with the window midpoint is mapped to per-target ON
//! probabilities through a linear readout and sigmoids.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nilm_core::preprocess::WindowBatch;

use crate::graph::{Graph, NodeId};
use crate::S2pError;

pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub conv_channels: usize,
    pub kernel: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    /// Number of stacked attention blocks.
    pub attn_depth: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            conv_channels: 16,
            kernel: 5,
            d_model: 32,
            heads: 2,
            head_dim: 16,
            ffn_hidden: 64,
            attn_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Snaps every value to f32 precision so the on-disk f32 encoding is
/// lossless against the in-memory state.
pub(crate) fn snap_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2PModel {
    pub window_len: usize,
    pub feature_dim: usize,
    pub targets: Vec<String>,
    pub arch: Architecture,
    /// Per-feature normalization applied inside `forward`.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    params: Vec<(String, Param)>,
}

/// Inspection handles into one window's forward graph, for tests and
/// the loss computation.
pub struct ForwardTrace {
    pub probs: NodeId,
    pub attention_rows: Vec<NodeId>,
    pub layer_norm_outputs: Vec<NodeId>,
}

impl S2PModel {
    pub fn new(
        window_len: usize,
        feature_dim: usize,
        targets: Vec<String>,
        arch: Architecture,
        seed: u64,
    ) -> Result<Self, S2pError> {
        if window_len < 3 || window_len.is_multiple_of(2) {
            return Err(S2pError::InvalidInput("window length must be odd and >= 3".into()));
        }
        let trimmed = 2 * (arch.kernel - 1);
        if window_len <= trimmed + 1 {
            return Err(S2pError::InvalidInput(format!(
                "window length {window_len} too short for two kernel-{} conv layers",
                arch.kernel
            )));
        }
        if targets.is_empty() {
            return Err(S2pError::InvalidInput("at least one target required".into()));
        }
        if arch.heads * arch.head_dim != arch.d_model {
            return Err(S2pError::InvalidInput("heads * head_dim must equal d_model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<(String, Param)> = Vec::new();
        fn init(
            name: String,
            rows: usize,
            cols: usize,
            rng: &mut ChaCha8Rng,
            params: &mut Vec<(String, Param)>,
        ) {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut values: Vec<f64> =
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            snap_f32(&mut values);
            params.push((name, Param { rows, cols, values }));
        }
        let zeros = |name: String, rows: usize, cols: usize, params: &mut Vec<(String, Param)>| {
            params.push((name, Param { rows, cols, values: vec![0.0; rows * cols] }));
        };
        let ones = |name: String, rows: usize, cols: usize, params: &mut Vec<(String, Param)>| {
            params.push((name, Param { rows, cols, values: vec![1.0; rows * cols] }));
        };

        let ch = arch.conv_channels;
        let k = arch.kernel;
        for f in 0..feature_dim {
            init(format!("conv1.{f}.w"), ch, k, &mut rng, &mut params);
            zeros(format!("conv1.{f}.b"), ch, 1, &mut params);
            init(format!("conv2.{f}.w"), ch, ch * k, &mut rng, &mut params);
            zeros(format!("conv2.{f}.b"), ch, 1, &mut params);
        }
        init("proj.w".into(), feature_dim * ch, arch.d_model, &mut rng, &mut params);
        zeros("proj.b".into(), 1, arch.d_model, &mut params);
        init("pos".into(), window_len, arch.d_model, &mut rng, &mut params);
        for l in 0..arch.attn_depth {
            for h in 0..arch.heads {
                init(format!("attn{l}.h{h}.wq"), arch.d_model, arch.head_dim, &mut rng, &mut params);
                init(format!("attn{l}.h{h}.wk"), arch.d_model, arch.head_dim, &mut rng, &mut params);
                init(format!("attn{l}.h{h}.wv"), arch.d_model, arch.head_dim, &mut rng, &mut params);
            }
            init(format!("attn{l}.wo"), arch.d_model, arch.d_model, &mut rng, &mut params);
            zeros(format!("attn{l}.bo"), 1, arch.d_model, &mut params);
            ones(format!("attn{l}.ln1.gain"), 1, arch.d_model, &mut params);
            zeros(format!("attn{l}.ln1.bias"), 1, arch.d_model, &mut params);
            init(format!("attn{l}.ffn.w1"), arch.d_model, arch.ffn_hidden, &mut rng, &mut params);
            zeros(format!("attn{l}.ffn.b1"), 1, arch.ffn_hidden, &mut params);
            init(format!("attn{l}.ffn.w2"), arch.ffn_hidden, arch.d_model, &mut rng, &mut params);
            zeros(format!("attn{l}.ffn.b2"), 1, arch.d_model, &mut params);
            ones(format!("attn{l}.ln2.gain"), 1, arch.d_model, &mut params);
            zeros(format!("attn{l}.ln2.bias"), 1, arch.d_model, &mut params);
        }
        init("out.w".into(), arch.d_model, targets.len(), &mut rng, &mut params);
        zeros("out.b".into(), 1, targets.len(), &mut params);

        Ok(Self {
            window_len,
            feature_dim,
            targets,
            arch,
            norm_mean: vec![0.0; feature_dim],
            norm_std: vec![1.0; feature_dim],
            params,
        })
    }

    pub fn from_parts(
        window_len: usize,
        feature_dim: usize,
        targets: Vec<String>,
        arch: Architecture,
        norm_mean: Vec<f64>,
        norm_std: Vec<f64>,
        params: Vec<(String, Param)>,
    ) -> Self {
        Self { window_len, feature_dim, targets, arch, norm_mean, norm_std, params }
    }

    pub fn params(&self) -> &[(String, Param)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn set_param_values(&mut self, name: &str, values: Vec<f64>) -> Result<(), S2pError> {
        let p = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| S2pError::InvalidInput(format!("unknown parameter {name}")))?;
        if values.len() != p.1.values.len() {
            return Err(S2pError::ShapeMismatch(format!("parameter {name} size mismatch")));
        }
        p.1.values = values;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<(String, Param)> {
        &mut self.params
    }

    /// Conv-output index aligned with the window midpoint.
    pub fn midpoint_conv_index(&self) -> usize {
        (self.window_len - 1) / 2 - (self.arch.kernel - 1)
    }

    /// Encoded sequence length after the two valid conv layers.
    pub fn encoded_len(&self) -> usize {
        self.window_len - 2 * (self.arch.kernel - 1)
    }

    fn check_window(&self, w: &WindowBatch) -> Result<(), S2pError> {
        if w.window_len != self.window_len || w.feature_dim != self.feature_dim {
            return Err(S2pError::ShapeMismatch(format!(
                "model expects {}x{} windows, got {}x{}",
                self.window_len, self.feature_dim, w.window_len, w.feature_dim
            )));
        }
        Ok(())
    }

    /// Inserts every parameter as a leaf node; order matches `params`.
    pub fn insert_params(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|(_, p)| g.leaf(p.rows, p.cols, p.values.clone()))
            .collect()
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Builds the forward graph for one window on top of already
    /// inserted parameter leaves.
    pub fn forward_window(
        &self,
        g: &mut Graph,
        param_ids: &[NodeId],
        window: &WindowBatch,
    ) -> Result<ForwardTrace, S2pError> {
        self.check_window(window)?;
        let p = |name: &str| param_ids[self.pid(name)];
        let arch = &self.arch;
        let w_len = self.window_len;
        let trim = arch.kernel - 1;
        let enc_len = self.encoded_len();

        // per-feature conv encoders on normalized inputs
        let mut encoded = Vec::with_capacity(self.feature_dim);
        for f in 0..self.feature_dim {
            let row: Vec<f64> = (0..w_len)
                .map(|t| (window.at(t, f) - self.norm_mean[f]) / (self.norm_std[f] + 1e-8))
                .collect();
            let x = g.leaf(1, w_len, row);
            let c1 = g.conv1d(x, p(&format!("conv1.{f}.w")), arch.kernel);
            let c1 = g.add_col(c1, p(&format!("conv1.{f}.b")));
            let c1 = g.relu(c1);
            let c2 = g.conv1d(c1, p(&format!("conv2.{f}.w")), arch.kernel);
            let c2 = g.add_col(c2, p(&format!("conv2.{f}.b")));
            encoded.push(g.relu(c2));
        }
        let stacked = g.concat_rows(&encoded); // [F*ch x enc_len]
        let seq = g.transpose(stacked); // [enc_len x F*ch]
        let h = g.matmul(seq, p("proj.w"));
        let mut h = g.add_row(h, p("proj.b"));
        // learned position embedding, offset so positions track input indices
        let pos = g.slice_rows(p("pos"), trim, enc_len);
        h = g.add(h, pos);

        let mut attention_rows = Vec::new();
        let mut layer_norm_outputs = Vec::new();
        for l in 0..arch.attn_depth {
            let mut head_outputs = Vec::with_capacity(arch.heads);
            for hd in 0..arch.heads {
                let q = g.matmul(h, p(&format!("attn{l}.h{hd}.wq")));
                let k = g.matmul(h, p(&format!("attn{l}.h{hd}.wk")));
                let v = g.matmul(h, p(&format!("attn{l}.h{hd}.wv")));
                let kt = g.transpose(k);
                let scores = g.matmul(q, kt);
                let scores = g.scale(scores, 1.0 / (arch.head_dim as f64).sqrt());
                let weights = g.softmax_rows(scores);
                attention_rows.push(weights);
                head_outputs.push(g.matmul(weights, v));
            }
            let merged = g.concat_cols(&head_outputs);
            let merged = g.matmul(merged, p(&format!("attn{l}.wo")));
            let merged = g.add_row(merged, p(&format!("attn{l}.bo")));
            let residual = g.add(h, merged);
            let normed = g.layer_norm_rows(residual, LAYER_NORM_EPS);
            layer_norm_outputs.push(normed);
            let scaled = g.mul_row(normed, p(&format!("attn{l}.ln1.gain")));
            let h1 = g.add_row(scaled, p(&format!("attn{l}.ln1.bias")));

            let f1 = g.matmul(h1, p(&format!("attn{l}.ffn.w1")));
            let f1 = g.add_row(f1, p(&format!("attn{l}.ffn.b1")));
            let f1 = g.relu(f1);
            let f2 = g.matmul(f1, p(&format!("attn{l}.ffn.w2")));
            let f2 = g.add_row(f2, p(&format!("attn{l}.ffn.b2")));
            let residual2 = g.add(h1, f2);
            let normed2 = g.layer_norm_rows(residual2, LAYER_NORM_EPS);
            layer_norm_outputs.push(normed2);
            let scaled2 = g.mul_row(normed2, p(&format!("attn{l}.ln2.gain")));
            h = g.add_row(scaled2, p(&format!("attn{l}.ln2.bias")));
        }

        let mid = g.select_row(h, self.midpoint_conv_index());
        let logits = g.matmul(mid, p("out.w"));
        let logits = g.add_row(logits, p("out.b"));
        let probs = g.sigmoid(logits);
        Ok(ForwardTrace { probs, attention_rows, layer_norm_outputs })
    }

    /// Per-target ON probabilities for each window in the batch.
    pub fn forward(&self, windows: &[WindowBatch]) -> Result<Vec<Vec<f64>>, S2pError> {
        let mut g = Graph::new();
        let param_ids = self.insert_params(&mut g);
        let mut out = Vec::with_capacity(windows.len());
        for w in windows {
            let trace = self.forward_window(&mut g, &param_ids, w)?;
            out.push(g.values(trace.probs).to_vec());
        }
        Ok(out)
    }

    /// Mean NLL over the batch plus gradients for every parameter.
    #[allow(clippy::type_complexity)] // named gradient vectors, one per parameter
    pub fn loss_and_grads(
        &self,
        windows: &[WindowBatch],
        labels: &[Vec<f64>],
    ) -> Result<(f64, Vec<(String, Vec<f64>)>), S2pError> {
        if windows.is_empty() {
            return Err(S2pError::InvalidInput("empty batch".into()));
        }
        if windows.len() != labels.len() {
            return Err(S2pError::ShapeMismatch("labels/windows length mismatch".into()));
        }
        let mut g = Graph::new();
        let param_ids = self.insert_params(&mut g);
        let mut losses = Vec::with_capacity(windows.len());
        for (w, y) in windows.iter().zip(labels) {
            let trace = self.forward_window(&mut g, &param_ids, w)?;
            losses.push(g.bce_mean(trace.probs, y.clone()));
        }
        let loss = g.mean_stack(&losses);
        g.backward(loss)?;
        let grads = self
            .params
            .iter()
            .zip(&param_ids)
            .map(|((name, _), id)| (name.clone(), g.grad(*id).to_vec()))
            .collect();
        Ok((g.values(loss)[0], grads))
    }

    /// Mean NLL only (used by finite-difference checks).
    pub fn loss(&self, windows: &[WindowBatch], labels: &[Vec<f64>]) -> Result<f64, S2pError> {
        let mut g = Graph::new();
        let param_ids = self.insert_params(&mut g);
        let mut losses = Vec::with_capacity(windows.len());
        for (w, y) in windows.iter().zip(labels) {
            let trace = self.forward_window(&mut g, &param_ids, w)?;
            losses.push(g.bce_mean(trace.probs, y.clone()));
        }
        let loss = g.mean_stack(&losses);
        Ok(g.values(loss)[0])
    }
}

/// Mean Bernoulli negative log-likelihood of plain probability vectors.
pub fn nll(probs: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, S2pError> {
    if probs.len() != truth.len() || probs.is_empty() {
        return Err(S2pError::ShapeMismatch("probs/truth batch mismatch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p_row, y_row) in probs.iter().zip(truth) {
        if p_row.len() != y_row.len() {
            return Err(S2pError::ShapeMismatch("probs/truth row mismatch".into()));
        }
        for (&p, &y) in p_row.iter().zip(y_row) {
            total -= y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
