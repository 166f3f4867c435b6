//! Appliance catalog and per-target ON/OFF state vectors.
//!
//! An appliance may expose several discrete operating levels (e.g. fan
//! speeds). Each (appliance, level) pair is its own binary detection
//! target; a single-level appliance keeps its plain id, a multi-level
//! one is expanded to `<id>_1 .. <id>_n`.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Power draw of one operating level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPower {
    /// Active power in watts.
    pub active_w: f64,
    /// Reactive power in var.
    pub reactive_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub appliance_id: String,
    pub display_name: String,
    pub levels: Vec<LevelPower>,
}

/// The set of appliances a scenario or model knows about.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplianceCatalog {
    entries: Vec<CatalogEntry>,
}

/// One expanded binary target: a concrete (appliance, level) pair.
#[derive(Debug, Clone)]
pub struct TargetRef {
    pub appliance_id: String,
    pub level_index: usize,
    /// Expanded id, e.g. `fan_2`; equals `appliance_id` for single-level appliances.
    pub target_id: String,
    pub active_w: f64,
    pub reactive_var: f64,
}

impl ApplianceCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self, CoreError> {
        if entries.is_empty() {
            return Err(CoreError::InvalidInput("catalog must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.appliance_id.is_empty() {
                return Err(CoreError::InvalidInput("empty appliance id".into()));
            }
            if !seen.insert(e.appliance_id.clone()) {
                return Err(CoreError::InvalidInput(format!(
                    "duplicate appliance id {}",
                    e.appliance_id
                )));
            }
            if e.levels.is_empty() {
                return Err(CoreError::InvalidInput(format!(
                    "appliance {} has no levels",
                    e.appliance_id
                )));
            }
            for l in &e.levels {
                if l.active_w < 0.0 || l.reactive_var < 0.0 {
                    return Err(CoreError::InvalidInput(format!(
                        "appliance {} has negative level power",
                        e.appliance_id
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn entry(&self, appliance_id: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.appliance_id == appliance_id)
    }

    /// Expanded binary targets in catalog order, level-major within an appliance.
    pub fn targets(&self) -> Vec<TargetRef> {
        let mut out = Vec::new();
        for e in &self.entries {
            for (i, l) in e.levels.iter().enumerate() {
                let target_id = if e.levels.len() == 1 {
                    e.appliance_id.clone()
                } else {
                    format!("{}_{}", e.appliance_id, i + 1)
                };
                out.push(TargetRef {
                    appliance_id: e.appliance_id.clone(),
                    level_index: i,
                    target_id,
                    active_w: l.active_w,
                    reactive_var: l.reactive_var,
                });
            }
        }
        out
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.targets().into_iter().map(|t| t.target_id).collect()
    }
}

/// Ordered binary ON/OFF states, one per expanded target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplianceStateVector {
    states: Vec<(String, bool)>,
}

impl ApplianceStateVector {
    pub fn new(states: Vec<(String, bool)>) -> Self {
        Self { states }
    }

    pub fn all_off(catalog: &ApplianceCatalog) -> Self {
        Self {
            states: catalog.target_ids().into_iter().map(|id| (id, false)).collect(),
        }
    }

    pub fn states(&self) -> &[(String, bool)] {
        &self.states
    }

    pub fn get(&self, target_id: &str) -> Option<bool> {
        self.states.iter().find(|(id, _)| id == target_id).map(|(_, s)| *s)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}
