// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight manifest directories.
//!
//! A manifest directory holds `manifest.json`, one or more raw little-endian
//! row-major tensor blobs, and optionally `tokenizer.json`:
//!
//! ```json
//! {
//!   "format": "lenskit-manifest",
//!   "version": 1,
//!   "config": { "n_layers": 2, ... },
//!   "tokenizer": "tokenizer.json",
//!   "tensors": [
//!     { "name": "token_embedding", "shape": [300, 16], "dtype": "f32",
//!       "file": "weights.bin", "offset": 0, "length": 19200, "crc32": 123 }
//!   ]
//! }
//! ```
//!
//! `length` is in bytes and `crc32` covers exactly those bytes. Matrices have
//! a two-element shape, vectors a one-element shape. `f32` tensors are widened
//! to `f64` on load.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelConfig, Tokenizer, WeightName, Weights};
use crate::error::{LensError, Result};
use crate::numerics::{Matrix, Vector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "lenskit-manifest";
const BLOB_FILE: &str = "weights.bin";
const TOKENIZER_FILE: &str = "tokenizer.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

fn load_err(tensor: &str, reason: impl Into<String>) -> LensError {
    LensError::Load { tensor: tensor.to_string(), reason: reason.into() }
}

/// Loads and validates a manifest directory (or a path to its `manifest.json`).
pub fn load_model(path: &Path) -> Result<Model> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format != FORMAT_TAG || manifest.version != 1 {
        return Err(LensError::Domain(format!(
            "unsupported manifest format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let config = manifest.config.clone();
    config.validate()?;

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut tensors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in &manifest.tensors {
        let name = WeightName::parse(&entry.name).ok_or_else(|| load_err(&entry.name, "unknown tensor name"))?;
        let (rows, cols) = name.shape(&config);
        let want_shape = if name.is_vector() { vec![rows] } else { vec![rows, cols] };
        if entry.shape != want_shape {
            return Err(load_err(&entry.name, format!("shape {:?}, expected {:?}", entry.shape, want_shape)));
        }
        let n = rows * cols;
        if entry.length != (n * entry.dtype.size()) as u64 {
            return Err(load_err(&entry.name, format!("length {} does not match shape", entry.length)));
        }
        if !blobs.contains_key(&entry.file) {
            let bytes = fs::read(dir.join(&entry.file))
                .map_err(|e| load_err(&entry.name, format!("blob {}: {e}", entry.file)))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let blob = &blobs[&entry.file];
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if end > blob.len() {
            return Err(load_err(
                &entry.name,
                format!("blob {} truncated: need bytes {start}..{end}, file has {}", entry.file, blob.len()),
            ));
        }
        let bytes = &blob[start..end];
        let crc = crc32fast::hash(bytes);
        if crc != entry.crc32 {
            return Err(load_err(&entry.name, format!("crc32 {crc:#010x} != recorded {:#010x}", entry.crc32)));
        }
        let values: Vec<f64> = match entry.dtype {
            Dtype::F32 => {
                bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect()
            }
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        if tensors.insert(entry.name.clone(), values).is_some() {
            return Err(load_err(&entry.name, "listed twice"));
        }
    }

    let mut take_m = |name: WeightName| -> Result<Matrix> {
        let key = name.to_string();
        let data = tensors.remove(&key).ok_or_else(|| load_err(&key, "missing"))?;
        let (r, c) = name.shape(&config);
        Matrix::from_vec(r, c, data).map_err(|e| load_err(&key, e.to_string()))
    };
    let token_embedding = take_m(WeightName::TokenEmbedding)?;
    let unembedding = take_m(WeightName::Unembedding)?;
    let mut mats = Vec::new();
    for l in 0..config.n_layers {
        mats.push([
            take_m(WeightName::Query(l))?,
            take_m(WeightName::Key(l))?,
            take_m(WeightName::Value(l))?,
            take_m(WeightName::Output(l))?,
            take_m(WeightName::Gate(l))?,
            take_m(WeightName::Up(l))?,
            take_m(WeightName::Down(l))?,
        ]);
    }
    let mut take_v = |name: WeightName, required: bool| -> Result<Option<Vector>> {
        let key = name.to_string();
        match tensors.remove(&key) {
            Some(v) => Ok(Some(Vector::from(v))),
            None if required => Err(load_err(&key, "missing")),
            None => Ok(None),
        }
    };
    let final_norm = take_v(WeightName::FinalNorm, true)?.expect("required");
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, [wq, wk, wv, wo, w_gate, w_up, w_down]) in mats.into_iter().enumerate() {
        layers.push(LayerWeights {
            attn_norm: take_v(WeightName::AttnNorm(l), true)?.expect("required"),
            wq,
            wk,
            wv,
            wo,
            wo_bias: take_v(WeightName::OutputBias(l), false)?,
            mlp_norm: take_v(WeightName::MlpNorm(l), true)?.expect("required"),
            w_gate,
            w_up,
            w_down,
        });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(load_err(extra, "not used by this configuration"));
    }

    let tokenizer = match &manifest.tokenizer {
        Some(file) => Some(Tokenizer::load(&dir.join(file))?),
        None => None,
    };
    Model::new(config, Weights { token_embedding, layers, final_norm, unembedding }, tokenizer)
}

/// Writes `model` as a manifest directory with a single blob.
pub fn save_model(model: &Model, dir: &Path, dtype: Dtype) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let config = model.config();
    let has_bias = model.weights().layers.iter().any(|l| l.wo_bias.is_some());
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for name in WeightName::all(config, has_bias) {
        let (r, c) = name.shape(config);
        let (values, shape): (&[f64], Vec<usize>) = if name.is_vector() {
            match model.vector(name) {
                Some(v) => (v, vec![r]),
                // Layers without a bias in a partially biased model get zeros.
                None => (&[], vec![r]),
            }
        } else {
            (model.matrix(name).expect("matrix weight").data(), vec![r, c])
        };
        let zeros;
        let values = if values.is_empty() {
            zeros = vec![0.0; r];
            &zeros[..]
        } else {
            values
        };
        let start = blob.len();
        for &x in values {
            match dtype {
                Dtype::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => blob.extend_from_slice(&x.to_le_bytes()),
            }
        }
        let bytes = &blob[start..];
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype,
            file: BLOB_FILE.to_string(),
            offset: start as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(bytes),
        });
    }
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let tokenizer = match model.tokenizer() {
        Some(t) => {
            t.save(&dir.join(TOKENIZER_FILE))?;
            Some(TOKENIZER_FILE.to_string())
        }
        None => None,
    };
    let manifest = Manifest { format: FORMAT_TAG.to_string(), version: 1, config: config.clone(), tokenizer, tensors };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Reference logits recorded by an exporter for cross-checking a load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceLogits {
    pub prompts: Vec<ReferencePrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferencePrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub tokens: Vec<u32>,
    pub logits: Vec<f64>,
}

impl ReferenceLogits {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Records the model's own logits for `prompts`.
    pub fn record(model: &Model, prompts: &[Vec<u32>]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(LensError::Domain("no reference prompts".into()));
        }
        let prompts = prompts
            .iter()
            .map(|tokens| {
                Ok(ReferencePrompt {
                    text: None,
                    tokens: tokens.clone(),
                    logits: model.run(tokens)?.logits.into_inner(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { prompts })
    }

    /// Largest absolute logit deviation of `model` from the recorded values.
    pub fn max_deviation(&self, model: &Model) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for p in &self.prompts {
            let logits = model.run(&p.tokens)?.logits;
            if logits.dim() != p.logits.len() {
                return Err(LensError::Shape {
                    op: "reference_logits",
                    left: (logits.dim(), 1),
                    right: (p.logits.len(), 1),
                });
            }
            worst = worst.max(logits.max_abs_diff(&p.logits));
        }
        Ok(worst)
    }
}
