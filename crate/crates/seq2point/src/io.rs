//! Model persistence: a JSON header describing shapes plus base64
//! blobs of little-endian f32 parameter values. Parameters are kept at
//! f32 precision in memory, so the round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Map, Value};

use crate::model::{Architecture, Param, S2PModel};
use crate::S2pError;

pub const FORMAT_VERSION: u64 = 1;

fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(s: &str, expected: usize, position: &str) -> Result<Vec<f64>, S2pError> {
    let bytes = B64.decode(s).map_err(|e| S2pError::Format {
        position: position.to_string(),
        message: format!("invalid base64: {e}"),
    })?;
    if bytes.len() != expected * 4 {
        return Err(S2pError::Format {
            position: position.to_string(),
            message: format!("expected {} bytes, got {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn to_json(model: &S2PModel) -> String {
    let arch = &model.arch;
    let params: Vec<Value> = model
        .params()
        .iter()
        .map(|(name, p)| {
            json!({
                "name": name,
                "rows": p.rows,
                "cols": p.cols,
                "data": encode_f32(&p.values),
            })
        })
        .collect();
    let doc = json!({
        "version": FORMAT_VERSION,
        "window_len": model.window_len,
        "feature_dim": model.feature_dim,
        "targets": model.targets,
        "arch": {
            "conv_channels": arch.conv_channels,
            "kernel": arch.kernel,
            "d_model": arch.d_model,
            "heads": arch.heads,
            "head_dim": arch.head_dim,
            "ffn_hidden": arch.ffn_hidden,
            "attn_depth": arch.attn_depth,
        },
        "norm_mean": encode_f32(&model.norm_mean),
        "norm_std": encode_f32(&model.norm_std),
        "params": params,
    });
    serde_json::to_string(&doc).expect("model serialization cannot fail")
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, position: &str) -> Result<&'a Value, S2pError> {
    obj.get(key).ok_or_else(|| S2pError::Format {
        position: position.to_string(),
        message: format!("missing field {key}"),
    })
}

fn as_usize(v: &Value, position: &str) -> Result<usize, S2pError> {
    v.as_u64().map(|n| n as usize).ok_or_else(|| S2pError::Format {
        position: position.to_string(),
        message: "expected a non-negative integer".into(),
    })
}

fn as_obj<'a>(v: &'a Value, position: &str) -> Result<&'a Map<String, Value>, S2pError> {
    v.as_object().ok_or_else(|| S2pError::Format {
        position: position.to_string(),
        message: "expected an object".into(),
    })
}

pub fn from_json(text: &str) -> Result<S2PModel, S2pError> {
    if text.trim().is_empty() {
        return Err(S2pError::Format { position: "document".into(), message: "empty input".into() });
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| S2pError::Format {
        position: "document".into(),
        message: e.to_string(),
    })?;
    let root = as_obj(&doc, "document")?;
    let version = as_usize(get(root, "version", "version")?, "version")? as u64;
    if version != FORMAT_VERSION {
        return Err(S2pError::Format {
            position: "version".into(),
            message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let window_len = as_usize(get(root, "window_len", "window_len")?, "window_len")?;
    let feature_dim = as_usize(get(root, "feature_dim", "feature_dim")?, "feature_dim")?;
    let targets: Vec<String> = get(root, "targets", "targets")?
        .as_array()
        .ok_or_else(|| S2pError::Format {
            position: "targets".into(),
            message: "expected an array".into(),
        })?
        .iter()
        .map(|t| {
            t.as_str().map(str::to_string).ok_or_else(|| S2pError::Format {
                position: "targets".into(),
                message: "expected strings".into(),
            })
        })
        .collect::<Result<_, _>>()?;
    let arch_obj = as_obj(get(root, "arch", "arch")?, "arch")?;
    let arch = Architecture {
        conv_channels: as_usize(get(arch_obj, "conv_channels", "arch.conv_channels")?, "arch.conv_channels")?,
        kernel: as_usize(get(arch_obj, "kernel", "arch.kernel")?, "arch.kernel")?,
        d_model: as_usize(get(arch_obj, "d_model", "arch.d_model")?, "arch.d_model")?,
        heads: as_usize(get(arch_obj, "heads", "arch.heads")?, "arch.heads")?,
        head_dim: as_usize(get(arch_obj, "head_dim", "arch.head_dim")?, "arch.head_dim")?,
        ffn_hidden: as_usize(get(arch_obj, "ffn_hidden", "arch.ffn_hidden")?, "arch.ffn_hidden")?,
        attn_depth: as_usize(get(arch_obj, "attn_depth", "arch.attn_depth")?, "arch.attn_depth")?,
    };
    let norm_mean = decode_f32(
        get(root, "norm_mean", "norm_mean")?.as_str().ok_or_else(|| S2pError::Format {
            position: "norm_mean".into(),
            message: "expected a string".into(),
        })?,
        feature_dim,
        "norm_mean",
    )?;
    let norm_std = decode_f32(
        get(root, "norm_std", "norm_std")?.as_str().ok_or_else(|| S2pError::Format {
            position: "norm_std".into(),
            message: "expected a string".into(),
        })?,
        feature_dim,
        "norm_std",
    )?;
    let raw_params = get(root, "params", "params")?.as_array().ok_or_else(|| S2pError::Format {
        position: "params".into(),
        message: "expected an array".into(),
    })?;
    let mut params = Vec::with_capacity(raw_params.len());
    for (i, raw) in raw_params.iter().enumerate() {
        let position = format!("params[{i}]");
        let obj = as_obj(raw, &position)?;
        let name = get(obj, "name", &position)?
            .as_str()
            .ok_or_else(|| S2pError::Format {
                position: position.clone(),
                message: "name must be a string".into(),
            })?
            .to_string();
        let rows = as_usize(get(obj, "rows", &position)?, &position)?;
        let cols = as_usize(get(obj, "cols", &position)?, &position)?;
        let data = get(obj, "data", &position)?.as_str().ok_or_else(|| S2pError::Format {
            position: position.clone(),
            message: "data must be a string".into(),
        })?;
        let values = decode_f32(data, rows * cols, &position)?;
        params.push((name, Param { rows, cols, values }));
    }
    Ok(S2PModel::from_parts(window_len, feature_dim, targets, arch, norm_mean, norm_std, params))
}

pub fn save(model: &S2PModel, path: &Path) -> Result<(), S2pError> {
    fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<S2PModel, S2pError> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> S2PModel {
        let mut m = S2PModel::new(
            11,
            2,
            vec!["fridge".into(), "fan_1".into()],
            Architecture::default(),
            42,
        )
        .unwrap();
        m.norm_mean = vec![120.5f32 as f64, 30.25];
        m.norm_std = vec![10.0, 2.5];
        m
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let model = sample_model();
        let reloaded = from_json(&to_json(&model)).unwrap();
        assert_eq!(reloaded, model);
        // serializing again produces identical bytes
        assert_eq!(to_json(&reloaded), to_json(&model));
    }

    #[test]
    fn file_round_trip() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2p.json");
        save(&model, &path).unwrap();
        assert_eq!(load(&path).unwrap(), model);
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let text = to_json(&sample_model()).replace("\"version\":1", "\"version\":99");
        match from_json(&text) {
            Err(S2pError::Format { position, .. }) => assert_eq!(position, "version"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_truncated_inputs_are_format_errors() {
        assert!(matches!(from_json(""), Err(S2pError::Format { .. })));
        assert!(matches!(from_json("   \n"), Err(S2pError::Format { .. })));
        let text = to_json(&sample_model());
        let truncated = &text[..text.len() / 2];
        assert!(matches!(from_json(truncated), Err(S2pError::Format { .. })));
    }

    #[test]
    fn corrupted_blob_length_is_a_format_error() {
        let model = sample_model();
        let doc = to_json(&model);
        let short = encode_f32(&[1.0]);
        let needle = format!("\"norm_mean\":\"{}\"", encode_f32(&model.norm_mean));
        let text = doc.replace(&needle, &format!("\"norm_mean\":\"{short}\""));
        assert_ne!(text, doc, "replacement target not found");
        match from_json(&text) {
            Err(S2pError::Format { position, .. }) => assert_eq!(position, "norm_mean"),
            other => panic!("expected blob length error, got {other:?}"),
        }
    }
}
