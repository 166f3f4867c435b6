//! Edge-side cleaning, normalization and sliding-window construction.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::catalog::{ApplianceCatalog, ApplianceStateVector};
use crate::error::CoreError;
use crate::sample::PowerSample;

/// Number of model features per timestep: active and reactive power.
pub const FEATURES: usize = 2;

/// A W x F window of features cut from one household's stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBatch {
    /// Row-major W x F values (t-major, features within a timestep).
    pub values: Vec<f64>,
    pub window_len: usize,
    pub feature_dim: usize,
    pub start_ts_ms: i64,
    pub end_ts_ms: i64,
    pub household_id: String,
}

impl WindowBatch {
    pub fn at(&self, t: usize, feature: usize) -> f64 {
        self.values[t * self.feature_dim + feature]
    }

    /// Timestep index the midpoint label refers to, within this window.
    pub fn midpoint_index(&self) -> usize {
        (self.window_len - 1) / 2
    }
}

fn features_of(s: &PowerSample) -> Result<[f64; FEATURES], CoreError> {
    match (s.active_power, s.reactive_power) {
        (Some(p), Some(q)) => Ok([p, q]),
        _ => Err(CoreError::InvalidInput(format!(
            "sample at ts {} is missing power features; run clean first",
            s.ts_ms
        ))),
    }
}

/// Validity predicate used by [`clean`].
pub fn is_valid(s: &PowerSample) -> bool {
    let required = [
        s.voltage,
        s.frequency,
        s.current,
        s.active_power,
        s.reactive_power,
        s.apparent_power,
        s.power_factor,
    ];
    if required.iter().any(|f| f.is_none()) {
        return false;
    }
    // reactive power may legitimately be negative; everything else may not
    for f in [s.active_power, s.apparent_power, s.current, s.frequency, s.voltage] {
        if f.unwrap() < 0.0 {
            return false;
        }
    }
    let pf = s.power_factor.unwrap();
    (0.0..=1.0).contains(&pf)
}

/// Drops dirty rows (missing fields, negative values, power factor out
/// of range), preserving order. Returns the clean stream and how many
/// rows were rejected.
pub fn clean(stream: &[PowerSample]) -> (Vec<PowerSample>, usize) {
    let clean: Vec<PowerSample> = stream.iter().filter(|s| is_valid(s)).cloned().collect();
    let rejected = stream.len() - clean.len();
    (clean, rejected)
}

/// Per-feature mean and standard deviation, fit on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const NORM_EPS: f64 = 1e-8;

pub fn normalize_fit(stream: &[PowerSample]) -> Result<NormStats, CoreError> {
    if stream.len() < 2 {
        return Err(CoreError::InvalidInput("need at least 2 rows to fit normalization".into()));
    }
    let n = stream.len() as f64;
    let mut mean = [0.0; FEATURES];
    for s in stream {
        let f = features_of(s)?;
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; FEATURES];
    for s in stream {
        let f = features_of(s)?;
        for (v, (x, m)) in var.iter_mut().zip(f.iter().zip(mean.iter())) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(NormStats { mean: mean.to_vec(), std })
}

/// Z-scores active and reactive power in place of the originals.
pub fn normalize_apply(stream: &[PowerSample], stats: &NormStats) -> Result<Vec<PowerSample>, CoreError> {
    let mut out = Vec::with_capacity(stream.len());
    for s in stream {
        let f = features_of(s)?;
        let mut s = s.clone();
        s.active_power = Some((f[0] - stats.mean[0]) / (stats.std[0] + NORM_EPS));
        s.reactive_power = Some((f[1] - stats.mean[1]) / (stats.std[1] + NORM_EPS));
        out.push(s);
    }
    Ok(out)
}

/// Batch sliding-window slicing: yields floor((n-W)/stride)+1 windows
/// for n >= W, each a contiguous slice of the stream.
pub fn window_stream(
    stream: &[PowerSample],
    window_len: usize,
    stride: usize,
    household_id: &str,
) -> Result<Vec<WindowBatch>, CoreError> {
    if window_len < 1 || stride < 1 {
        return Err(CoreError::InvalidInput("window length and stride must be >= 1".into()));
    }
    let n = stream.len();
    if n < window_len {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity((n - window_len) / stride + 1);
    let mut start = 0;
    while start + window_len <= n {
        let slice = &stream[start..start + window_len];
        let mut values = Vec::with_capacity(window_len * FEATURES);
        for s in slice {
            values.extend(features_of(s)?);
        }
        out.push(WindowBatch {
            values,
            window_len,
            feature_dim: FEATURES,
            start_ts_ms: slice[0].ts_ms,
            end_ts_ms: slice[window_len - 1].ts_ms,
            household_id: household_id.to_string(),
        });
        start += stride;
    }
    Ok(out)
}

/// Streaming FIFO window queue: push one sample at a time, the oldest
/// sample is evicted once the queue is full, and every push at capacity
/// emits the current window (stride 1).
#[derive(Debug)]
pub struct WindowQueue {
    window_len: usize,
    household_id: String,
    buf: VecDeque<(i64, [f64; FEATURES])>,
}

impl WindowQueue {
    pub fn new(window_len: usize, household_id: impl Into<String>) -> Result<Self, CoreError> {
        if window_len < 1 {
            return Err(CoreError::InvalidInput("window length must be >= 1".into()));
        }
        Ok(Self { window_len, household_id: household_id.into(), buf: VecDeque::new() })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn push(&mut self, sample: &PowerSample) -> Result<Option<WindowBatch>, CoreError> {
        self.push_features(sample.ts_ms, features_of(sample)?)
    }

    pub fn push_features(
        &mut self,
        ts_ms: i64,
        features: [f64; FEATURES],
    ) -> Result<Option<WindowBatch>, CoreError> {
        if self.buf.len() == self.window_len {
            self.buf.pop_front();
        }
        self.buf.push_back((ts_ms, features));
        if self.buf.len() < self.window_len {
            return Ok(None);
        }
        let mut values = Vec::with_capacity(self.window_len * FEATURES);
        for (_, f) in &self.buf {
            values.extend(f);
        }
        Ok(Some(WindowBatch {
            values,
            window_len: self.window_len,
            feature_dim: FEATURES,
            start_ts_ms: self.buf.front().unwrap().0,
            end_ts_ms: self.buf.back().unwrap().0,
            household_id: self.household_id.clone(),
        }))
    }
}

/// Relabels from submetered per-appliance power: a level is ON iff the
/// appliance's metered power is at least `theta_frac` of that level's
/// catalog draw (boundary inclusive).
pub fn label_threshold(
    per_appliance_watts: &HashMap<String, f64>,
    catalog: &ApplianceCatalog,
    theta_frac: f64,
) -> Result<ApplianceStateVector, CoreError> {
    if !(0.0 < theta_frac && theta_frac < 1.0) {
        return Err(CoreError::InvalidInput("theta_frac must be in (0,1)".into()));
    }
    for id in per_appliance_watts.keys() {
        if catalog.entry(id).is_none() {
            return Err(CoreError::InvalidInput(format!("unknown appliance id {id}")));
        }
    }
    let states = catalog
        .targets()
        .into_iter()
        .map(|t| {
            let watts = per_appliance_watts.get(&t.appliance_id).copied().unwrap_or(0.0);
            let on = t.active_w > 0.0 && watts >= theta_frac * t.active_w;
            (t.target_id, on)
        })
        .collect();
    Ok(ApplianceStateVector::new(states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CatalogEntry, LevelPower};
    use proptest::prelude::*;

    fn sample(ts: i64, p: f64, q: f64) -> PowerSample {
        PowerSample {
            ts_ms: ts,
            voltage: Some(220.0),
            frequency: Some(50.0),
            current: Some(0.5),
            active_power: Some(p),
            reactive_power: Some(q),
            apparent_power: Some((p * p + q * q).sqrt()),
            power_factor: Some(1.0),
            labels: None,
        }
    }

    #[test]
    fn clean_rejects_negative_active_power() {
        let mut bad = sample(0, 100.0, 1.0);
        bad.active_power = Some(-5.0);
        let (kept, rejected) = clean(&[sample(0, 1.0, 1.0), bad]);
        assert_eq!((kept.len(), rejected), (1, 1));
    }

    #[test]
    fn clean_keeps_negative_reactive_power() {
        let mut s = sample(0, 100.0, 1.0);
        s.reactive_power = Some(-3.0);
        let (kept, rejected) = clean(&[s]);
        assert_eq!((kept.len(), rejected), (1, 0));
    }

    #[test]
    fn clean_identity_on_valid_stream() {
        let stream: Vec<_> = (0..10).map(|i| sample(i, i as f64, 0.0)).collect();
        let (kept, rejected) = clean(&stream);
        assert_eq!(rejected, 0);
        assert_eq!(kept, stream);
    }

    #[test]
    fn clean_is_idempotent_and_conserves_counts() {
        let mut stream: Vec<_> = (0..50).map(|i| sample(i, i as f64, 0.0)).collect();
        stream[3].voltage = None;
        stream[17].power_factor = Some(1.5);
        let (kept, rejected) = clean(&stream);
        assert_eq!(kept.len() + rejected, stream.len());
        let (again, rejected2) = clean(&kept);
        assert_eq!(rejected2, 0);
        assert_eq!(again, kept);
    }

    #[test]
    fn normalize_fit_moments() {
        let stream: Vec<_> = (0..100).map(|i| sample(i, (i % 7) as f64 * 3.0, (i % 5) as f64)).collect();
        let stats = normalize_fit(&stream).unwrap();
        let normed = normalize_apply(&stream, &stats).unwrap();
        let refit = normalize_fit(&normed).unwrap();
        for m in refit.mean {
            assert!(m.abs() < 1e-6);
        }
        for s in refit.std {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_constant_feature_is_zeroed() {
        let stream: Vec<_> = (0..10).map(|i| sample(i, 42.0, 1.0)).collect();
        let stats = normalize_fit(&stream).unwrap();
        let normed = normalize_apply(&stream, &stats).unwrap();
        for s in &normed {
            assert_eq!(s.active_power, Some(0.0));
        }
    }

    #[test]
    fn normalize_needs_two_rows() {
        assert!(normalize_fit(&[sample(0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn window_counts() {
        let stream: Vec<_> = (0..10).map(|i| sample(i, i as f64, 0.0)).collect();
        assert_eq!(window_stream(&stream, 5, 1, "h").unwrap().len(), 6);
        assert_eq!(window_stream(&stream, 10, 1, "h").unwrap().len(), 1);
        assert_eq!(window_stream(&stream[..3], 5, 1, "h").unwrap().len(), 0);
    }

    #[test]
    fn streaming_matches_batch_slicing() {
        let stream: Vec<_> = (0..37).map(|i| sample(i, (i * i % 13) as f64, i as f64)).collect();
        let batch = window_stream(&stream, 7, 1, "h").unwrap();
        let mut q = WindowQueue::new(7, "h").unwrap();
        let mut streamed = Vec::new();
        for s in &stream {
            if let Some(w) = q.push(s).unwrap() {
                streamed.push(w);
            }
        }
        assert_eq!(streamed, batch);
    }

    #[test]
    fn windows_reconstruct_prefix() {
        let stream: Vec<_> = (0..12).map(|i| sample(i, i as f64, -(i as f64))).collect();
        let w = 4;
        let windows = window_stream(&stream, w, w, "h").unwrap();
        let mut rebuilt = Vec::new();
        for win in &windows {
            rebuilt.extend_from_slice(&win.values);
        }
        let expect: Vec<f64> = stream[..windows.len() * w]
            .iter()
            .flat_map(|s| [s.active_power.unwrap(), s.reactive_power.unwrap()])
            .collect();
        assert_eq!(rebuilt, expect);
    }

    #[test]
    fn label_threshold_rules() {
        let catalog = ApplianceCatalog::new(vec![CatalogEntry {
            appliance_id: "fan".into(),
            display_name: "Fan".into(),
            levels: vec![LevelPower { active_w: 80.0, reactive_var: 0.0 }],
        }])
        .unwrap();
        let mut watts = HashMap::new();
        watts.insert("fan".to_string(), 80.0);
        assert!(label_threshold(&watts, &catalog, 0.5).unwrap().get("fan").unwrap());
        watts.insert("fan".to_string(), 0.0);
        assert!(!label_threshold(&watts, &catalog, 0.5).unwrap().get("fan").unwrap());
        // boundary is inclusive
        watts.insert("fan".to_string(), 40.0);
        assert!(label_threshold(&watts, &catalog, 0.5).unwrap().get("fan").unwrap());
        watts.insert("oven".to_string(), 10.0);
        assert!(label_threshold(&watts, &catalog, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn clean_partition_property(flags in proptest::collection::vec(any::<bool>(), 0..80)) {
            let stream: Vec<PowerSample> = flags
                .iter()
                .enumerate()
                .map(|(i, dirty)| {
                    let mut s = sample(i as i64, 10.0, 1.0);
                    if *dirty {
                        s.current = None;
                    }
                    s
                })
                .collect();
            let (kept, rejected) = clean(&stream);
            prop_assert_eq!(kept.len() + rejected, stream.len());
            prop_assert_eq!(rejected, flags.iter().filter(|d| **d).count());
        }
    }
}
