//! Checkpoint container: `USTK`, a little-endian `u32` manifest length, the
//! JSON manifest, then one named `.t32` record per tensor. Record names are
//! `param/…`, `buffer/…`, `adam.m/…` and `adam.v/…`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AttentionMode, ModelConfig, TransporterModel};
use crate::error::{Error, Result};
use crate::numerics::{t32, AdamConfig, AdamState, ParamStore};

pub const MAGIC: &[u8; 4] = b"USTK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub arch_hash: String,
    pub k: usize,
    pub attention: AttentionMode,
    pub cbam: bool,
    pub rtfpm_hash: Option<String>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: Option<u64>,
    pub adam: Option<AdamConfig>,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransporterModel<f32>,
    pub adam: Option<AdamState>,
    pub rtfpm_hash: Option<String>,
    pub epoch: usize,
    pub seed: u64,
    pub best_val_loss: Option<f64>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let c = &self.model.config;
        Manifest {
            format_version: FORMAT_VERSION,
            model: c.clone(),
            arch_hash: c.arch_hash(),
            k: c.k,
            attention: c.attention,
            cbam: c.cbam,
            rtfpm_hash: self.rtfpm_hash.clone(),
            epoch: self.epoch,
            seed: self.seed,
            adam_step: self.adam.as_ref().map(|a| a.step),
            adam: self.adam.as_ref().map(|a| a.config),
            best_val_loss: self.best_val_loss,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |prefix: &str, name: &str, t| {
            t32::write_record(&mut buf, t, Some(&format!("{prefix}/{name}"))).expect("Vec write");
        };
        for (n, t) in self.model.params.params() {
            put("param", n, t);
        }
        for (n, t) in self.model.params.buffers() {
            put("buffer", n, t);
        }
        if let Some(a) = &self.adam {
            for (n, t) in &a.m {
                put("adam.m", n, t);
            }
            for (n, t) in &a.v {
                put("adam.v", n, t);
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(format_err(path, "missing USTK magic"));
        }
        let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| format_err(path, "truncated manifest"))?;
        let man: Manifest = serde_json::from_slice(json).map_err(|e| format_err(path, format!("manifest: {e}")))?;
        if man.format_version != FORMAT_VERSION {
            return Err(format_err(path, format!("format version {}", man.format_version)));
        }
        man.model.validate()?;
        if man.arch_hash != man.model.arch_hash() {
            return Err(Error::ArchitectureMismatch(format!(
                "{}: stored architecture hash does not match its own model config",
                path.display()
            )));
        }

        let mut cursor = &bytes[8 + len..];
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        while let Some((h, t)) = t32::read_record(&mut cursor, path)? {
            let name = h.name.ok_or_else(|| format_err(path, "unnamed record"))?;
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| format_err(path, format!("bad record name {name}")))?;
            match kind {
                "param" => params.insert_param(key, t),
                "buffer" => params.insert_buffer(key, t),
                "adam.m" => drop(m.insert(key.to_string(), t)),
                "adam.v" => drop(v.insert(key.to_string(), t)),
                _ => return Err(format_err(path, format!("unknown record kind {kind}"))),
            }
        }

        for (name, shape, is_buffer) in man.model.parameter_shapes() {
            let t = if is_buffer {
                params.buffer(&name)
            } else {
                params.param(&name)
            }
            .map_err(|_| format_err(path, format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(format_err(path, format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        let adam = match (man.adam, man.adam_step) {
            (Some(config), Some(step)) => Some(AdamState { step, config, m, v }),
            _ => None,
        };
        Ok(Checkpoint {
            model: TransporterModel {
                config: man.model,
                params,
            },
            adam,
            rtfpm_hash: man.rtfpm_hash,
            epoch: man.epoch,
            seed: man.seed,
            best_val_loss: man.best_val_loss,
        })
    }

    /// Loads and refuses a checkpoint whose architecture differs from
    /// `expected`, listing every differing field.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let diff = config_diff(&ck.model.config, expected);
        if !diff.is_empty() {
            return Err(Error::ArchitectureMismatch(format!("{}: {}", path.display(), diff.join(", "))));
        }
        Ok(ck)
    }
}

/// `field: checkpoint X, config Y` for every differing field.
pub fn config_diff(stored: &ModelConfig, expected: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(stored).expect("config serializes");
    let b = serde_json::to_value(expected).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return vec![];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", b.get(k).cloned().unwrap_or_default()))
        .collect()
}
