//! Checkpoint directories: `manifest.json` plus one little-endian f64 file
//! per parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{JrmModel, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checkpoint config mismatch in `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("parameter `{name}`: {message}")]
    Param { name: String, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &JrmModel, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let store = model.params();
    let mut params = Vec::with_capacity(store.len());
    for id in 0..store.len() {
        let name = store.name(id).to_string();
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        let t = store.tensor(id);
        std::fs::write(&path, t.to_le_bytes()).map_err(io(&path))?;
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        params,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io(&path))
}

fn compare_configs(found: &ModelConfig, expected: &ModelConfig) -> Result<(), CheckpointError> {
    let f = serde_json::to_value(found).expect("config serializes");
    let e = serde_json::to_value(expected).expect("config serializes");
    let (f, e) = (f.as_object().unwrap(), e.as_object().unwrap());
    for (key, ev) in e {
        let fv = &f[key];
        if fv != ev {
            return Err(CheckpointError::ConfigMismatch {
                field: key.clone(),
                found: fv.to_string(),
                expected: ev.to_string(),
            });
        }
    }
    Ok(())
}

/// Loads a checkpoint. With `expected`, the stored configuration must match
/// it exactly; the first differing field is reported.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<JrmModel, CheckpointError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Manifest {
            path,
            message: format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    if let Some(exp) = expected {
        compare_configs(&manifest.config, exp)?;
    }
    let mut model = JrmModel::new(manifest.config.clone(), 0).map_err(|e| CheckpointError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.params.len() != model.params().len() {
        return Err(CheckpointError::Manifest {
            path,
            message: format!(
                "{} parameters listed, configuration defines {}",
                manifest.params.len(),
                model.params().len()
            ),
        });
    }
    for entry in &manifest.params {
        let perr = |message: String| CheckpointError::Param {
            name: entry.name.clone(),
            message,
        };
        let id = model
            .params()
            .id(&entry.name)
            .ok_or_else(|| perr("not defined by the configuration".into()))?;
        let want = model.params().tensor(id).shape().to_vec();
        if entry.shape != want {
            return Err(perr(format!("shape {:?}, expected {:?}", entry.shape, want)));
        }
        let p = dir.join(&entry.file);
        let bytes = std::fs::read(&p).map_err(io(&p))?;
        let t = Tensor::from_le_bytes(entry.shape.clone(), &bytes).map_err(|e| perr(e.to_string()))?;
        *model.params_mut().tensor_mut(id) = t;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        };
        let m = JrmModel::new(cfg.clone(), 9).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
        assert_eq!(m.params().flatten(), back.params().flatten());
        assert_eq!(back.config(), &cfg);
    }

    #[test]
    fn mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        };
        save_checkpoint(&JrmModel::new(cfg.clone(), 9).unwrap(), dir.path()).unwrap();
        let other = ModelConfig { d_ff: 64, ..cfg };
        match load_checkpoint(dir.path(), Some(&other)) {
            Err(CheckpointError::ConfigMismatch { field, .. }) => assert_eq!(field, "d_ff"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("mismatched config accepted"),
        }
    }

    #[test]
    fn truncated_parameter_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        };
        save_checkpoint(&JrmModel::new(cfg, 9).unwrap(), dir.path()).unwrap();
        std::fs::write(dir.path().join("reward_head.b.bin"), [0u8; 5]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None),
            Err(CheckpointError::Param { .. })
        ));
    }
}
