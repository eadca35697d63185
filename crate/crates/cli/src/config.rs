use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pin_core::{FeatureSchema, PinConfig, TrainConfig};

/// Everything a run needs besides data: the column schema, the architecture
/// and the optimizer settings. Only `schema` is required.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: FeatureSchema,
    #[serde(default)]
    pub model: PinConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

impl RunConfig {
    /// Reads either a full run config or a bare schema file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let config = if value.get("schema").is_some() {
            serde_json::from_value(value)?
        } else {
            RunConfig {
                schema: serde_json::from_value(value)?,
                model: PinConfig::default(),
                training: TrainConfig::default(),
            }
        };
        config.schema.validate()?;
        config.model.validate()?;
        config.training.validate()?;
        Ok(config)
    }
}

/// Parses `7`, `1,2,5`, `1..10` or `1..=10` (ranges are inclusive).
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((lo, hi)) = text.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: u64 = lo.trim().parse().map_err(|_| format!("invalid range start in {text:?}"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| format!("invalid range end in {text:?}"))?;
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| format!("invalid seed {s:?}")))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("no seeds in {text:?}"));
    }
    Ok(seeds)
}

/// Resolves a feature by name or 1-based position.
pub fn feature_index(schema: &FeatureSchema, key: &str) -> Result<usize> {
    if let Some(j) = schema.feature_index(key) {
        return Ok(j);
    }
    match key.parse::<usize>() {
        Ok(j) if (1..=schema.num_features()).contains(&j) => Ok(j - 1),
        _ => bail!("unknown feature {key:?}"),
    }
}
