//! Model (de)serialization.
//!
//! One JSON document per model; nodes are encoded as `{f,t,l,r}` splits
//! or `{w}` leaves. Floats are written with 17 significant digits so a
//! save/load round trip is bit-stable.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::features::FeatureSchema;
use crate::tree::TreeNode;
use crate::{GbdtError, GbdtModel, TargetModel};

pub const FORMAT_VERSION: u64 = 1;

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        // integral values print exactly without an exponent
        format!("{v:.1}")
    } else {
        format!("{v:.16e}")
    }
}

fn write_node(out: &mut String, node: &TreeNode) {
    match node {
        TreeNode::Leaf { weight } => {
            let _ = write!(out, "{{\"w\":{}}}", fmt_f64(*weight));
        }
        TreeNode::Split { feature, threshold, left, right } => {
            let _ = write!(out, "{{\"f\":{feature},\"t\":{},\"l\":", fmt_f64(*threshold));
            write_node(out, left);
            out.push_str(",\"r\":");
            write_node(out, right);
            out.push('}');
        }
    }
}

pub fn to_json(model: &GbdtModel) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"version\":{FORMAT_VERSION},\"schema\":{{\"window_len\":{},\"feature_dim\":{}}},\"learning_rate\":{},\"targets\":[",
        model.schema.window_len,
        model.schema.feature_dim,
        fmt_f64(model.learning_rate)
    );
    for (i, t) in model.targets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{{\"appliance_id\":{},\"base_score\":{},\"trees\":[",
            serde_json::to_string(&t.target_id).expect("string encodes"),
            fmt_f64(t.base_score)
        );
        for (j, tree) in t.trees.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write_node(&mut out, tree);
        }
        out.push_str("]}");
    }
    out.push_str("]}");
    out
}

pub fn save(model: &GbdtModel, path: impl AsRef<Path>) -> Result<(), GbdtError> {
    std::fs::write(path, to_json(model))?;
    Ok(())
}

fn format_err(position: impl Into<String>, message: impl Into<String>) -> GbdtError {
    GbdtError::Format { position: position.into(), message: message.into() }
}

fn get<'a>(obj: &'a Value, key: &str, at: &str) -> Result<&'a Value, GbdtError> {
    obj.get(key).ok_or_else(|| format_err(at, format!("missing field {key:?}")))
}

fn as_f64(v: &Value, at: &str) -> Result<f64, GbdtError> {
    v.as_f64().ok_or_else(|| format_err(at, "expected a number"))
}

fn parse_node(v: &Value, at: &str) -> Result<TreeNode, GbdtError> {
    let obj = v.as_object().ok_or_else(|| format_err(at, "expected a node object"))?;
    if let Some(w) = obj.get("w") {
        return Ok(TreeNode::Leaf { weight: as_f64(w, at)? });
    }
    let feature = get(v, "f", at)?
        .as_u64()
        .ok_or_else(|| format_err(at, "feature index must be an integer"))? as usize;
    let threshold = as_f64(get(v, "t", at)?, at)?;
    if !threshold.is_finite() {
        return Err(format_err(at, "threshold must be finite"));
    }
    Ok(TreeNode::Split {
        feature,
        threshold,
        left: Box::new(parse_node(get(v, "l", at)?, &format!("{at}.l"))?),
        right: Box::new(parse_node(get(v, "r", at)?, &format!("{at}.r"))?),
    })
}

pub fn from_json(text: &str) -> Result<GbdtModel, GbdtError> {
    let root: Value = serde_json::from_str(text).map_err(|e| {
        format_err(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let version = get(&root, "version", "$")?
        .as_u64()
        .ok_or_else(|| format_err("$.version", "expected an integer"))?;
    if version != FORMAT_VERSION {
        return Err(format_err("$.version", format!("unsupported version {version}")));
    }
    let schema_v = get(&root, "schema", "$")?;
    let schema = FeatureSchema {
        window_len: get(schema_v, "window_len", "$.schema")?
            .as_u64()
            .ok_or_else(|| format_err("$.schema.window_len", "expected an integer"))?
            as usize,
        feature_dim: get(schema_v, "feature_dim", "$.schema")?
            .as_u64()
            .ok_or_else(|| format_err("$.schema.feature_dim", "expected an integer"))?
            as usize,
    };
    let learning_rate = as_f64(get(&root, "learning_rate", "$")?, "$.learning_rate")?;
    let targets_v = get(&root, "targets", "$")?
        .as_array()
        .ok_or_else(|| format_err("$.targets", "expected an array"))?;
    let mut targets = Vec::with_capacity(targets_v.len());
    for (i, tv) in targets_v.iter().enumerate() {
        let at = format!("$.targets[{i}]");
        let target_id = get(tv, "appliance_id", &at)?
            .as_str()
            .ok_or_else(|| format_err(&at, "appliance_id must be a string"))?
            .to_string();
        let base_score = as_f64(get(tv, "base_score", &at)?, &at)?;
        let trees_v = get(tv, "trees", &at)?
            .as_array()
            .ok_or_else(|| format_err(&at, "trees must be an array"))?;
        let mut trees = Vec::with_capacity(trees_v.len());
        for (j, nv) in trees_v.iter().enumerate() {
            trees.push(parse_node(nv, &format!("{at}.trees[{j}]"))?);
        }
        targets.push(TargetModel { target_id, base_score, trees });
    }
    Ok(GbdtModel { schema, learning_rate, targets })
}

pub fn load(path: impl AsRef<Path>) -> Result<GbdtModel, GbdtError> {
    from_json(&std::fs::read_to_string(path)?)
}
