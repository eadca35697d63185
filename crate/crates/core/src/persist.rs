//! JSON model files.
//!
//! A file holds a metadata object (format tag, config, schema, scalers,
//! seeds, pair orientation and mask) and the parameter blocks as decimal
//! strings with 17 significant digits, which round-trip `f64` exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, ScalerSet};
use crate::embedding::{EmbeddingKind, FeatureEmbedding};
use crate::error::{PinError, Result};
use crate::model::{Pair, PinConfig, PinModel};
use crate::numeric::ParameterSet;

pub const MODEL_FORMAT: &str = "pin-model/1";

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    library_version: String,
    config: PinConfig,
    schema: FeatureSchema,
    scalers: ScalerSet,
    seeds: Vec<u64>,
    embeddings: Vec<EmbeddingKind>,
    pairs: Vec<Pair>,
    active: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    metadata: Metadata,
    /// One entry per parameter block, in `ParameterSet` order.
    parameters: Vec<Vec<String>>,
}

fn encode(x: f64) -> String {
    format!("{x:.16e}")
}

fn decode(s: &str) -> Result<f64> {
    let x: f64 = s
        .parse()
        .map_err(|_| PinError::Load(format!("invalid parameter value {s:?}")))?;
    if !x.is_finite() {
        return Err(PinError::Load(format!("non-finite parameter value {s:?}")));
    }
    Ok(x)
}

pub fn model_to_json(model: &PinModel) -> Result<String> {
    let file = ModelFile {
        metadata: Metadata {
            format: MODEL_FORMAT.to_string(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            config: model.config,
            schema: model.schema.clone(),
            scalers: model.scalers.clone(),
            seeds: model.seeds.clone(),
            embeddings: model.params.embeddings.iter().map(FeatureEmbedding::kind).collect(),
            pairs: model.pairs.clone(),
            active: model.active.clone(),
        },
        parameters: model
            .params
            .blocks()
            .iter()
            .map(|b| b.iter().copied().map(encode).collect())
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn model_from_json(text: &str) -> Result<PinModel> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| PinError::Load(format!("corrupt model file: {e}")))?;
    let format = value.pointer("/metadata/format").and_then(|v| v.as_str());
    if format != Some(MODEL_FORMAT) {
        return Err(PinError::Load(format!(
            "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
            format.unwrap_or("<missing>")
        )));
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| PinError::Load(format!("corrupt model file: {e}")))?;
    let meta = file.metadata;
    let q = meta.schema.num_features();
    if meta.embeddings.len() != q {
        return Err(PinError::Load(format!("{} embeddings for {q} features", meta.embeddings.len())));
    }
    let mut model = PinModel::new(meta.schema, meta.scalers, meta.config, 0)
        .map_err(|e| PinError::Load(format!("invalid metadata: {e}")))?;
    for (emb, kind) in model.params.embeddings.iter_mut().zip(&meta.embeddings) {
        match kind {
            EmbeddingKind::Identity => *emb = FeatureEmbedding::Identity { dim: meta.config.embedding_dim },
            k if *k == emb.kind() => {}
            k => return Err(PinError::Load(format!("embedding kind {k:?} does not match the schema"))),
        }
    }
    if meta.pairs.len() != model.num_pairs() || meta.active.len() != model.num_pairs() {
        return Err(PinError::Load("pair metadata does not match the feature count".into()));
    }
    let mut seen = vec![false; model.num_pairs()];
    for pair in &meta.pairs {
        if pair.first >= q || pair.second >= q {
            return Err(PinError::Load(format!("pair {pair:?} out of range")));
        }
        let (j, k) = pair.canonical();
        seen[model.pair_position(j, k)] = true;
    }
    if seen.contains(&false) {
        return Err(PinError::Load("pair list is not a permutation of all pairs".into()));
    }
    model.pairs = meta.pairs;
    model.active = meta.active;
    model.seeds = meta.seeds;

    let mut blocks = model.params.blocks_mut();
    if blocks.len() != file.parameters.len() {
        return Err(PinError::Load(format!(
            "expected {} parameter blocks, found {}",
            blocks.len(),
            file.parameters.len()
        )));
    }
    for (i, (dst, src)) in blocks.iter_mut().zip(&file.parameters).enumerate() {
        if dst.len() != src.len() {
            return Err(PinError::Load(format!(
                "parameter block {i} has {} values, expected {}",
                src.len(),
                dst.len()
            )));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            *d = decode(s)?;
        }
    }
    Ok(model)
}

/// Writes the model next to its destination and renames it into place.
pub fn save_model(model: &PinModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), model_to_json(model)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PinModel> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| PinError::Load(format!("{}: {e}", path.as_ref().display())))?;
    model_from_json(&text)
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
