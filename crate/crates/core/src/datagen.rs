//! Synthetic household-load scenario generation.
//!
//! Each (appliance, level) target follows a two-state Markov chain with
//! exponential dwell times; the aggregate measurement is the sum of the
//! ON targets' catalog powers plus optional gaussian noise. Generation
//! is fully determined by the config's seed. A controllable fraction of
//! rows can be corrupted afterwards to exercise the cleaning pass.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{ApplianceCatalog, ApplianceStateVector};
use crate::error::CoreError;
use crate::sample::PowerSample;

/// Operating dynamics of one appliance. Level powers come from the catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplianceProfile {
    pub appliance_id: String,
    /// Mean ON dwell per level, seconds. `f64::INFINITY` pins the level ON.
    pub mean_on_s: f64,
    /// Mean OFF dwell per level, seconds. `f64::INFINITY` pins the level OFF.
    pub mean_off_s: f64,
    /// Gaussian noise on the appliance's active-power contribution, watts.
    pub noise_sigma_w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub catalog: ApplianceCatalog,
    pub profiles: Vec<ApplianceProfile>,
    /// Scenario length in seconds.
    pub duration_s: f64,
    /// Sampling period in seconds.
    #[serde(default = "default_sample_period")]
    pub sample_period_s: f64,
    pub seed: u64,
    /// Fraction of rows to corrupt, in [0, 1).
    #[serde(default)]
    pub dirty_fraction: f64,
}

fn default_sample_period() -> f64 {
    2.0
}

impl ScenarioConfig {
    fn validate(&self) -> Result<(), CoreError> {
        if self.sample_period_s <= 0.0 {
            return Err(CoreError::InvalidInput("sample period must be > 0".into()));
        }
        if self.duration_s < self.sample_period_s {
            return Err(CoreError::InvalidInput("duration shorter than one sample period".into()));
        }
        if !(0.0..1.0).contains(&self.dirty_fraction) {
            return Err(CoreError::InvalidInput("dirty_fraction must be in [0,1)".into()));
        }
        for e in self.catalog.entries() {
            let p = self
                .profiles
                .iter()
                .find(|p| p.appliance_id == e.appliance_id)
                .ok_or_else(|| {
                    CoreError::InvalidInput(format!("no profile for appliance {}", e.appliance_id))
                })?;
            // infinite dwell is allowed (pins an appliance on or off)
            let bad = |v: f64| v.is_nan() || v <= 0.0;
            if bad(p.mean_on_s) || bad(p.mean_off_s) {
                return Err(CoreError::InvalidInput(format!(
                    "profile {} durations must be > 0",
                    p.appliance_id
                )));
            }
            if p.noise_sigma_w < 0.0 {
                return Err(CoreError::InvalidInput(format!(
                    "profile {} sigma must be >= 0",
                    p.appliance_id
                )));
            }
        }
        Ok(())
    }
}

/// Stationary ON probability of a two-state chain with the given mean dwells.
fn stationary_on(mean_on: f64, mean_off: f64) -> f64 {
    if mean_on.is_infinite() && mean_off.is_infinite() {
        return 0.0;
    }
    // 1 / (1 + mean_off/mean_on) handles one-sided infinities cleanly
    1.0 / (1.0 + mean_off / mean_on)
}

/// Per-step switch probability for a dwell sampled at period `dt`.
fn switch_prob(mean_dwell: f64, dt: f64) -> f64 {
    if mean_dwell.is_infinite() {
        0.0
    } else {
        1.0 - (-dt / mean_dwell).exp()
    }
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Vec<PowerSample>, CoreError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.sample_period_s;
    let n = (cfg.duration_s / dt).floor() as usize;
    let targets = cfg.catalog.targets();

    // one chain per expanded target, initialized from the stationary distribution
    struct Chain {
        on: bool,
        p_on: f64,  // OFF -> ON per step
        p_off: f64, // ON -> OFF per step
        sigma: f64,
        active_w: f64,
        reactive_var: f64,
        target_id: String,
    }
    let mut chains: Vec<Chain> = Vec::with_capacity(targets.len());
    for t in &targets {
        let prof = cfg
            .profiles
            .iter()
            .find(|p| p.appliance_id == t.appliance_id)
            .expect("validated above");
        chains.push(Chain {
            on: rng.gen::<f64>() < stationary_on(prof.mean_on_s, prof.mean_off_s),
            p_on: switch_prob(prof.mean_off_s, dt),
            p_off: switch_prob(prof.mean_on_s, dt),
            sigma: prof.noise_sigma_w,
            active_w: t.active_w,
            reactive_var: t.reactive_var,
            target_id: t.target_id.clone(),
        });
    }

    let voltage_noise = Normal::new(0.0, 0.5).expect("valid sigma");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ts_ms = (i as f64 * dt * 1000.0) as i64;
        let mut p = 0.0;
        let mut q = 0.0;
        let mut states = Vec::with_capacity(chains.len());
        for c in chains.iter_mut() {
            if i > 0 {
                let flip = rng.gen::<f64>();
                if c.on {
                    if flip < c.p_off {
                        c.on = false;
                    }
                } else if flip < c.p_on {
                    c.on = true;
                }
            }
            if c.on {
                p += c.active_w;
                q += c.reactive_var;
                if c.sigma > 0.0 {
                    p += Normal::new(0.0, c.sigma).expect("valid sigma").sample(&mut rng);
                }
            }
            states.push((c.target_id.clone(), c.on));
        }
        let p = p.max(0.0);
        let apparent = (p * p + q * q).sqrt();
        let power_factor = if apparent > 0.0 { p / apparent } else { 1.0 };
        let voltage = 220.0 + voltage_noise.sample(&mut rng);
        out.push(PowerSample {
            ts_ms,
            voltage: Some(voltage),
            frequency: Some(50.0),
            current: Some(apparent / voltage),
            active_power: Some(p),
            reactive_power: Some(q),
            apparent_power: Some(apparent),
            power_factor: Some(power_factor),
            labels: Some(ApplianceStateVector::new(states)),
        });
    }
    Ok(out)
}

/// Corrupts exactly `round(fraction * n)` rows, chosen uniformly by seed.
///
/// Each chosen row gets exactly one corrupted field: either a required
/// field blanked, or a nonnegative power field negated (blanked when it
/// is zero, so the row is guaranteed to fail the cleaning predicate).
/// Returns the corrupted row indices in ascending order.
pub fn inject_dirty(
    stream: &mut [PowerSample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, CoreError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CoreError::InvalidInput("fraction must be in [0,1)".into()));
    }
    let n = stream.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    for &i in &indices {
        let s = &mut stream[i];
        let field = rng.gen_range(0..7u8);
        let negate = rng.gen::<bool>();
        let slot = match field {
            0 => &mut s.voltage,
            1 => &mut s.frequency,
            2 => &mut s.current,
            3 => &mut s.active_power,
            4 => &mut s.reactive_power,
            5 => &mut s.apparent_power,
            _ => &mut s.power_factor,
        };
        // reactive power and power factor have no negativity rule that a
        // flipped sign would reliably trip, so those are always blanked
        let negatable = matches!(field, 0..=3 | 5);
        match slot {
            Some(v) if negate && negatable && *v > 0.0 => *v = -*v,
            _ => *slot = None,
        }
    }
    Ok(indices)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Writes a stream in the canonical CSV layout:
/// `ts_ms,voltage,frequency,current,active_power,reactive_power,apparent_power,power_factor,<label columns…>`
/// with 0/1 label values and empty string for missing numeric fields.
pub fn write_csv(stream: &[PowerSample], path: impl AsRef<Path>) -> Result<(), CoreError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let label_ids: Vec<String> = stream
        .first()
        .and_then(|s| s.labels.as_ref())
        .map(|l| l.states().iter().map(|(id, _)| id.clone()).collect())
        .unwrap_or_default();
    let mut header = String::from(
        "ts_ms,voltage,frequency,current,active_power,reactive_power,apparent_power,power_factor",
    );
    for id in &label_ids {
        header.push(',');
        header.push_str(id);
    }
    writeln!(f, "{header}")?;
    for s in stream {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            s.ts_ms,
            fmt_opt(s.voltage),
            fmt_opt(s.frequency),
            fmt_opt(s.current),
            fmt_opt(s.active_power),
            fmt_opt(s.reactive_power),
            fmt_opt(s.apparent_power),
            fmt_opt(s.power_factor),
        );
        if let Some(labels) = &s.labels {
            for (_, on) in labels.states() {
                row.push(',');
                row.push(if *on { '1' } else { '0' });
            }
        }
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

fn parse_opt(field: &str, line: usize, name: &str) -> Result<Option<f64>, CoreError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| CoreError::Parse { line, message: format!("bad {name} value {field:?}") })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<PowerSample>, CoreError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(CoreError::Parse { line: 1, message: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 8 || cols[0] != "ts_ms" {
        return Err(CoreError::Parse { line: 1, message: "unexpected header".into() });
    }
    let label_ids: Vec<String> = cols[8..].iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 + label_ids.len() {
            return Err(CoreError::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", 8 + label_ids.len(), fields.len()),
            });
        }
        let ts_ms = fields[0]
            .parse::<i64>()
            .map_err(|_| CoreError::Parse { line: lineno, message: format!("bad ts_ms {:?}", fields[0]) })?;
        let labels = if label_ids.is_empty() {
            None
        } else {
            let mut states = Vec::with_capacity(label_ids.len());
            for (id, field) in label_ids.iter().zip(&fields[8..]) {
                let on = match *field {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(CoreError::Parse {
                            line: lineno,
                            message: format!("bad label value {other:?} for {id}"),
                        })
                    }
                };
                states.push((id.clone(), on));
            }
            Some(ApplianceStateVector::new(states))
        };
        out.push(PowerSample {
            ts_ms,
            voltage: parse_opt(fields[1], lineno, "voltage")?,
            frequency: parse_opt(fields[2], lineno, "frequency")?,
            current: parse_opt(fields[3], lineno, "current")?,
            active_power: parse_opt(fields[4], lineno, "active_power")?,
            reactive_power: parse_opt(fields[5], lineno, "reactive_power")?,
            apparent_power: parse_opt(fields[6], lineno, "apparent_power")?,
            power_factor: parse_opt(fields[7], lineno, "power_factor")?,
            labels,
        });
    }
    Ok(out)
}
