//! Flat JSON checkpoints: configuration plus every named parameter.
//!
//! Values survive a save/load cycle bit for bit (the JSON layer prints
//! shortest round-trip decimal for every f64), and the file is ordered by
//! parameter name, so identical models always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::transformer::{partition_params, AdapterKind, EncoderConfig, Model, ParamGroup};

pub const CHECKPOINT_FORMAT: &str = "faa-checkpoint-v1";

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Parse(serde_json::Error),
    /// Structural problems: wrong format tag, unknown or missing parameter
    /// names, shape disagreements, stale trainability flags.
    Format(String),
    NonFiniteParam { name: String },
    InvalidConfig(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Parse(e) => write!(f, "checkpoint parse error: {e}"),
            CheckpointError::Format(msg) => write!(f, "checkpoint format error: {msg}"),
            CheckpointError::NonFiniteParam { name } => {
                write!(f, "checkpoint refused: parameter {name} contains a non-finite value")
            }
            CheckpointError::InvalidConfig(msg) => {
                write!(f, "checkpoint carries an invalid configuration: {msg}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::Parse(e)
    }
}

// ── Document layout ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    faa: crate::adapter::FaaConfig,
    encoder: EncoderConfig,
    kind: AdapterKind,
    params: BTreeMap<String, StoredTensor>,
    partition: BTreeMap<String, ParamGroup>,
    trainable: Vec<String>,
}

// ── Save / load ──────────────────────────────────────────────────────────

pub fn model_to_json(model: &Model) -> Result<String, CheckpointError> {
    let mut params = BTreeMap::new();
    let mut trainable = Vec::new();
    let mut non_finite = None;
    model.visit(&mut |name, t| {
        if non_finite.is_none() && !t.is_finite() {
            non_finite = Some(name.clone());
        }
        if t.requires_grad {
            trainable.push(name.clone());
        }
        params.insert(name, StoredTensor { shape: t.shape.clone(), data: t.data.clone() });
    });
    if let Some(name) = non_finite {
        return Err(CheckpointError::NonFiniteParam { name });
    }
    trainable.sort();
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        faa: model.faa.clone(),
        encoder: model.encoder.clone(),
        kind: model.kind,
        params,
        partition: partition_params(model).labels,
        trainable,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn model_from_json(text: &str) -> Result<Model, CheckpointError> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(format!(
            "unsupported format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            doc.format
        )));
    }
    let mut model = Model::init(doc.faa, doc.encoder, doc.kind)
        .map_err(CheckpointError::InvalidConfig)?;

    let mut errors = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    let mut trainable_now = Vec::new();
    model.visit_mut(&mut |name, t| {
        if t.requires_grad {
            trainable_now.push(name.clone());
        }
        match doc.params.get(&name) {
            None => errors.push(format!("missing parameter {name}")),
            Some(stored) => {
                used.insert(name.clone());
                if stored.shape != t.shape {
                    errors.push(format!(
                        "parameter {name} has shape {:?} but checkpoint stores {:?}",
                        t.shape, stored.shape
                    ));
                } else if stored.data.len() != t.data.len() {
                    errors.push(format!(
                        "parameter {name} stores {} values for shape {:?}",
                        stored.data.len(),
                        stored.shape
                    ));
                } else {
                    t.data.copy_from_slice(&stored.data);
                }
            }
        }
    });
    for name in doc.params.keys() {
        if !used.contains(name) {
            errors.push(format!("unknown parameter {name}"));
        }
    }
    trainable_now.sort();
    if doc.trainable != trainable_now {
        errors.push("trainable parameter list disagrees with the configuration".to_string());
    }
    if let Some(first) = errors.into_iter().next() {
        return Err(CheckpointError::Format(first));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let json = model_to_json(model)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::FaaConfig;
    use crate::transformer::EncoderConfig;

    fn small_model() -> Model {
        let faa = FaaConfig {
            d_model: 8,
            r: 4,
            d_rff: 8,
            num_grids: 3,
            insertion_layers: vec![0],
            ..FaaConfig::toy()
        };
        let encoder =
            EncoderConfig { n_blocks: 2, n_heads: 2, d_ff: 12, n_classes: 2, conditional_gamma: false };
        let mut model = Model::init(faa, encoder, AdapterKind::Faa).unwrap();
        // Values that do not have short decimal expansions.
        model.set_param("block.0.adapter.gamma", &[1.0 / 3.0; 8]);
        model.set_param("head.b", &[0.1 + 0.2, -1e-17]);
        model
    }

    fn assert_models_identical(a: &Model, b: &Model) {
        let mut lhs = Vec::new();
        a.visit(&mut |name, t| lhs.push((name, t.shape.clone(), t.data.clone(), t.requires_grad)));
        let mut rhs = Vec::new();
        b.visit(&mut |name, t| rhs.push((name, t.shape.clone(), t.data.clone(), t.requires_grad)));
        assert_eq!(lhs.len(), rhs.len());
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert_eq!(l.0, r.0);
            assert_eq!(l.1, r.1, "{} shape", l.0);
            assert_eq!(l.3, r.3, "{} trainability", l.0);
            assert!(
                l.2.iter().zip(r.2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} values differ",
                l.0
            );
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_models_identical(&model, &loaded);
    }

    #[test]
    fn identical_models_serialize_to_identical_bytes() {
        let a = model_to_json(&small_model()).unwrap();
        let b = model_to_json(&small_model()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_named() {
        let json = model_to_json(&small_model()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["params"]["head.b"]["shape"] = serde_json::json!([3]);
        doc["params"]["head.b"]["data"] = serde_json::json!([0.0, 0.0, 0.0]);
        let err = model_from_json(&doc.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.b"), "unexpected message: {msg}");
        assert!(msg.contains("shape"), "unexpected message: {msg}");
    }

    #[test]
    fn unknown_parameters_are_rejected() {
        let json = model_to_json(&small_model()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["params"]["block.9.zz"] =
            serde_json::json!({ "shape": [1], "data": [0.0] });
        let err = model_from_json(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("unknown parameter block.9.zz"));
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let json = model_to_json(&small_model()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["format"] = serde_json::json!("other-format");
        let err = model_from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(err, CheckpointError::Format(_)), "got {err}");
    }

    #[test]
    fn non_finite_values_refuse_to_serialize() {
        let mut model = small_model();
        model.set_param("head.b", &[f64::NAN, 0.0]);
        let err = model_to_json(&model).unwrap_err();
        assert!(matches!(err, CheckpointError::NonFiniteParam { ref name } if name == "head.b"));
    }
}
