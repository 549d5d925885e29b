//! On-disk model checkpoints: a directory holding `manifest.json` (tensor
//! names, shapes, byte offsets, config echo, seed, vocabulary) and
//! `weights.bin`, the tensors as little-endian f32 in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::config::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TextGnn};
use crate::tokenize::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "textgnn-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub vocab: Option<Vocabulary>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn save(model: &TextGnn, seed: u64, metadata: BTreeMap<String, serde_json::Value>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        dtype: "f32".into(),
        seed,
        config: model.cfg.clone(),
        vocab: model.vocab.clone(),
        tensors,
        metadata,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(TextGnn, Manifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Data(format!("cannot read checkpoint manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.schema_version != SCHEMA_VERSION || manifest.dtype != "f32" {
        return Err(Error::Data(format!(
            "unsupported checkpoint: format {:?}, schema {}, dtype {:?}",
            manifest.format, manifest.schema_version, manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 4;
        if entry.offset != expected_offset || end > blob.len() {
            return Err(Error::Data(format!("tensor {} lies outside the weights file", entry.name)));
        }
        let data: Vec<Real> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Data("weights file has trailing bytes".into()));
    }
    let model = TextGnn::from_parts(manifest.config.clone(), manifest.vocab.clone(), params)?;
    Ok((model, manifest))
}
