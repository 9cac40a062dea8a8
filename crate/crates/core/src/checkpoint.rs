//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a JSON header,
//! then little-endian `f64` blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Captioner, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MESHCAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob area.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    epoch: u32,
    seed: u64,
    adam: Option<AdamMeta>,
    meta: Value,
    manifest: Vec<ManifestEntry>,
}

/// Everything needed to resume training or serve captions.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
    /// Number of completed epochs.
    pub epoch: u32,
    /// Seed of the run's shuffling stream; each epoch derives its order
    /// from `(seed, epoch)`.
    pub seed: u64,
    /// Free-form run metadata (the training configuration).
    pub meta: Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// First field, in key order, whose values differ between two configs.
pub fn first_config_difference(found: &ModelConfig, expected: &ModelConfig) -> Result<Option<(String, String, String)>> {
    let (Value::Object(f), Value::Object(e)) = (serde_json::to_value(found)?, serde_json::to_value(expected)?) else {
        unreachable!("ModelConfig serializes to an object")
    };
    for (k, ev) in &e {
        let fv = f.get(k).cloned().unwrap_or(Value::Null);
        if &fv != ev {
            return Ok(Some((k.clone(), fv.to_string(), ev.to_string())));
        }
    }
    Ok(None)
}

impl Checkpoint {
    pub fn capture(
        model: &Captioner,
        vocab: &Vocabulary,
        adam: Option<&AdamState>,
        epoch: u32,
        seed: u64,
        meta: Value,
    ) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("valid")))
                .collect(),
            adam: adam.cloned(),
            epoch,
            seed,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut manifest = Vec::new();
        let mut push = |name: &str, section, shape: &[usize], data: &[f64]| {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                section,
                shape: shape.to_vec(),
                offset: blobs.len() as u64,
                len: data.len() as u64,
            });
            for v in data {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            push(name, Section::Param, t.shape(), t.data());
        }
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.params.len() {
                return Err(Error::Parameter("optimizer state does not match parameter count".into()));
            }
            for (((name, t), m), v) in self.params.iter().zip(&adam.m).zip(&adam.v) {
                push(name, Section::AdamM, t.shape(), m);
                push(name, Section::AdamV, t.shape(), v);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            seed: self.seed,
            adam: self.adam.as_ref().map(|a| AdamMeta {
                step: a.step,
                beta1: a.config.beta1,
                beta2: a.config.beta2,
                eps: a.config.eps,
            }),
            meta: self.meta.clone(),
            manifest,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let version: Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let found = version.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found, expected: FORMAT_VERSION });
        }
        let header: Header =
            serde_json::from_value(version).map_err(|e| corrupt(format!("invalid header: {e}")))?;
        let blobs = &bytes[header_end..];
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut expected_end = 0u64;
        for entry in &header.manifest {
            let numel: usize = entry.shape.iter().product();
            if numel as u64 != entry.len || entry.offset != expected_end {
                return Err(corrupt(format!("manifest entry `{}` is inconsistent", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + 8 * numel;
            if end > blobs.len() {
                return Err(corrupt(format!("truncated data for `{}`", entry.name)));
            }
            expected_end = end as u64;
            let data: Vec<f64> = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match entry.section {
                Section::Param => params.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)),
                Section::AdamM => m.push(data),
                Section::AdamV => v.push(data),
            }
        }
        if expected_end as usize != blobs.len() {
            return Err(corrupt("trailing bytes after parameter data"));
        }
        let adam = match header.adam {
            Some(meta) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(corrupt("optimizer moments do not cover every parameter"));
                }
                Some(AdamState {
                    config: AdamConfig { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps },
                    step: meta.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            adam,
            epoch: header.epoch,
            seed: header.seed,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors with the first differing field when the stored config is not
    /// `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        match first_config_difference(&self.config, expected)? {
            None => Ok(()),
            Some((field, found, expected)) => Err(Error::ConfigMismatch { field, found, expected }),
        }
    }

    /// Rebuilds the model from the stored config and copies every parameter.
    pub fn into_model(self) -> Result<(Captioner, Vocabulary, Option<AdamState>)> {
        if self.vocab.len() != self.config.vocab_size {
            return Err(corrupt(format!(
                "vocabulary has {} tokens, config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let mut model = Captioner::new(self.config.clone())?;
        if self.params.len() != model.store.len() {
            return Err(corrupt(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in self.params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| corrupt(format!("unexpected parameter `{name}`")))?;
            let slot = model.store.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(corrupt(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok((model, self.vocab, self.adam))
    }
}
