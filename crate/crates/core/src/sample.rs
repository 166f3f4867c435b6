use serde::{Deserialize, Serialize};

use crate::catalog::ApplianceStateVector;

/// One timestamped electrical measurement row.
///
/// Numeric fields are optional so that dirty data (missing fields,
/// sensor glitches) stays representable; the `preprocess::clean` pass
/// is where validity is decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Milliseconds since the Unix epoch.
    pub ts_ms: i64,
    /// Mains voltage in volts.
    pub voltage: Option<f64>,
    /// Mains frequency in hertz.
    pub frequency: Option<f64>,
    /// Mains current (CT probe reading) in amperes.
    pub current: Option<f64>,
    /// Aggregate active power in watts.
    pub active_power: Option<f64>,
    /// Aggregate reactive power in var. May legitimately be negative.
    pub reactive_power: Option<f64>,
    /// Aggregate apparent power in VA.
    pub apparent_power: Option<f64>,
    /// Active / apparent, in [0, 1].
    pub power_factor: Option<f64>,
    /// Ground-truth per-target ON/OFF labels, when known.
    pub labels: Option<ApplianceStateVector>,
}
