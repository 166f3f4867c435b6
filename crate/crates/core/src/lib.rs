//! Core building blocks for non-intrusive load monitoring (NILM):
//! domain types for electrical measurements and appliance catalogs,
//! ON/OFF classification metrics, a synthetic household scenario
//! generator, and the edge-side preprocessing pipeline (cleaning,
//! normalization, sliding windows).

pub mod catalog;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod preprocess;
pub mod sample;

pub use catalog::{ApplianceCatalog, ApplianceStateVector, CatalogEntry, LevelPower, TargetRef};
pub use error::CoreError;
pub use metrics::{ConfusionCounts, MetricsReport, MetricsRow};
pub use preprocess::{NormStats, WindowBatch, WindowQueue};
pub use sample::PowerSample;
