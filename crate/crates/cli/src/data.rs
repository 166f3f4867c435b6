//! Shared dataset plumbing for train/eval: windowing, midpoint labels,
//! and metric evaluation against the per-target truth.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use nilm_core::metrics::{confusion, MetricsReport, MetricsRow};
use nilm_core::preprocess::{self, window_stream};
use nilm_core::{PowerSample, WindowBatch};

/// Reads, cleans, and chronologically sorts a measurement CSV.
pub fn load_clean(path: &Path) -> Result<(Vec<PowerSample>, usize)> {
    let raw = nilm_core::datagen::read_csv(path)
        .with_context(|| format!("cannot read dataset {}", path.display()))?;
    let (mut clean, dropped) = preprocess::clean(&raw);
    clean.sort_by_key(|s| s.ts_ms);
    Ok((clean, dropped))
}

/// A labeled supervised set: one window per stride-1 position, labeled
/// by the state vector of the window's midpoint sample.
pub struct Supervised {
    pub windows: Vec<WindowBatch>,
    pub target_ids: Vec<String>,
    /// Row-per-window, column-per-target truth.
    pub labels: Vec<Vec<bool>>,
}

pub fn build_supervised(samples: &[PowerSample], window_len: usize) -> Result<Supervised> {
    if window_len < 1 || window_len.is_multiple_of(2) {
        bail!("window length must be odd and positive, got {window_len}");
    }
    if samples.len() < window_len {
        bail!("dataset has {} samples, needs at least {window_len}", samples.len());
    }
    let windows = window_stream(samples, window_len, 1, "train")?;
    let mid = (window_len - 1) / 2;
    let first_labels = samples[mid]
        .labels
        .as_ref()
        .ok_or_else(|| anyhow!("dataset rows carry no appliance labels"))?;
    let target_ids: Vec<String> =
        first_labels.states().iter().map(|(id, _)| id.clone()).collect();

    let mut labels = Vec::with_capacity(windows.len());
    for i in 0..windows.len() {
        let states = samples[i + mid]
            .labels
            .as_ref()
            .ok_or_else(|| anyhow!("row at ts {} has no labels", samples[i + mid].ts_ms))?;
        let row: Vec<bool> = target_ids
            .iter()
            .map(|id| {
                states
                    .get(id)
                    .ok_or_else(|| anyhow!("row at ts {} is missing target {id}", samples[i + mid].ts_ms))
            })
            .collect::<Result<_>>()?;
        labels.push(row);
    }
    Ok(Supervised { windows, target_ids, labels })
}

/// Splits chronologically: first 80% train, last 20% held out.
pub fn chronological_split(samples: &[PowerSample]) -> (&[PowerSample], &[PowerSample]) {
    let cut = samples.len() * 8 / 10;
    (&samples[..cut], &samples[cut..])
}

/// Per-target metrics from per-window probabilities against the truth.
pub fn evaluate(
    target_ids: &[String],
    probs: &[Vec<f64>],
    truth: &[Vec<bool>],
    cutoff: f64,
) -> Result<MetricsReport> {
    if probs.len() != truth.len() {
        bail!("{} predictions vs {} truth rows", probs.len(), truth.len());
    }
    let mut rows = Vec::with_capacity(target_ids.len());
    for (j, id) in target_ids.iter().enumerate() {
        let pred: Vec<bool> = probs.iter().map(|row| row[j] > cutoff).collect();
        let t: Vec<bool> = truth.iter().map(|row| row[j]).collect();
        let counts = confusion(&pred, &t)?;
        rows.push(MetricsRow::from_counts(id.clone(), &counts)?);
    }
    Ok(MetricsReport::new(rows)?)
}
