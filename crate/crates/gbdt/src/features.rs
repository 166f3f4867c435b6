//! Window-to-feature-vector extraction shared by training and inference.

use nilm_core::preprocess::WindowBatch;

/// Shape contract between window construction and the model: feature
/// vectors are the flattened W x F window plus five summary statistics
/// (mean, std, min, max, last-first delta) per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSchema {
    pub window_len: usize,
    pub feature_dim: usize,
}

impl FeatureSchema {
    pub fn n_features(&self) -> usize {
        self.window_len * self.feature_dim + 5 * self.feature_dim
    }
}

pub fn window_features(window: &WindowBatch) -> Vec<f64> {
    let w = window.window_len;
    let f = window.feature_dim;
    let mut out = Vec::with_capacity(w * f + 5 * f);
    out.extend_from_slice(&window.values);
    for j in 0..f {
        let col: Vec<f64> = (0..w).map(|t| window.at(t, j)).collect();
        let mean = col.iter().sum::<f64>() / w as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(mean);
        out.push(var.sqrt());
        out.push(min);
        out.push(max);
        out.push(col[w - 1] - col[0]);
    }
    out
}
