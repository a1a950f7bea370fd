//! Flat `key = value` run configuration.
//!
//! Keys are `encoder.*`, `decoder.*` and `train.*` followed by a field name.
//! Blank lines and `#` comments are ignored. Later assignments win, so
//! command-line overrides are applied after the file.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use hkgx_core::decoder::DecoderConfig;
use hkgx_core::encoder::EncoderConfig;
use hkgx_core::trainer::TrainConfig;
use serde::Serialize;

pub const KEYS: &[&str] = &[
    "encoder.flavor",
    "encoder.layers",
    "encoder.dim",
    "encoder.share_ratio",
    "encoder.composition",
    "encoder.dropout",
    "encoder.aggregation",
    "encoder.activation",
    "decoder.flavor",
    "decoder.relation_pooling",
    "decoder.filter_len",
    "decoder.num_filters",
    "decoder.max_positions",
    "decoder.dropout",
    "decoder.batch_norm",
    "train.batch_size",
    "train.learning_rate",
    "train.negatives",
    "train.epochs",
    "train.max_steps",
    "train.eval_every",
    "train.patience",
    "train.seed",
    "train.variant",
];

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    /// Whether `train.seed` was assigned explicitly.
    #[serde(skip)]
    pub seed_set: bool,
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!(hkgx_core::Error::Config(format!("{key}: {e}"))))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (e, d, t) = (&mut self.encoder, &mut self.decoder, &mut self.train);
        match key {
            "encoder.flavor" => e.flavor = parse(key, value)?,
            "encoder.layers" => e.layers = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.share_ratio" => e.share_ratio = parse(key, value)?,
            "encoder.composition" => e.composition = parse(key, value)?,
            "encoder.dropout" => e.dropout = parse(key, value)?,
            "encoder.aggregation" => e.aggregation = parse(key, value)?,
            "encoder.activation" => e.activation = parse(key, value)?,
            "decoder.flavor" => d.flavor = parse(key, value)?,
            "decoder.relation_pooling" => d.relation_pooling = parse(key, value)?,
            "decoder.filter_len" => d.filter_len = parse(key, value)?,
            "decoder.num_filters" => d.num_filters = parse(key, value)?,
            "decoder.max_positions" => d.max_positions = parse(key, value)?,
            "decoder.dropout" => d.dropout = parse(key, value)?,
            "decoder.batch_norm" => d.batch_norm = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.negatives" => t.negatives = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.max_steps" => {
                t.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.seed" => {
                t.seed = parse(key, value)?;
                self.seed_set = true;
            }
            "train.variant" => t.variant = parse(key, value)?,
            other => {
                return Err(anyhow!(hkgx_core::Error::Config(format!(
                    "unknown config key {other:?}; known keys: {}",
                    KEYS.join(", ")
                ))))
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            anyhow!(hkgx_core::Error::Config(format!("expected key=value, got {pair:?}")))
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow!(hkgx_core::Error::io(path, e)))?;
        self.apply_text(&text, &path.display().to_string())
    }
}
