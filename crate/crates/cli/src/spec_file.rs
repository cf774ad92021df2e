//! Line-oriented model spec files.
//!
//! ```text
//! # comment
//! vocab_size = 32
//! n_layers = 4
//! d_model = 32
//! n_heads = 4
//! d_ff = 64
//! max_seq_len = 16
//! tie_embeddings = true
//! override.block_*/attn/qkv/kernel = attention_qkv
//! ```
//!
//! Missing architecture keys keep the default toy model's values.
//! `override.<glob> = <role>` lines pin parameter roles for the planner.

use std::path::Path;

use indexmap::IndexMap;
use shardwise::model::TransformerConfig;
use shardwise::plan::ParamRole;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model: TransformerConfig,
    pub overrides: IndexMap<String, ParamRole>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            overrides: IndexMap::new(),
        }
    }
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut spec = ModelSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| SpecError::Parse { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(pattern) = key.strip_prefix("override.") {
                let role: ParamRole = value.parse().map_err(|e| err(format!("{e}")))?;
                spec.overrides.insert(pattern.to_string(), role);
                continue;
            }
            let m = &mut spec.model;
            let int = || -> Result<usize, SpecError> {
                value
                    .parse()
                    .map_err(|_| err(format!("`{key}` must be a non-negative integer, got `{value}`")))
            };
            match key {
                "vocab_size" => m.vocab_size = int()?,
                "n_layers" => m.n_layers = int()?,
                "d_model" => m.d_model = int()?,
                "n_heads" => m.n_heads = int()?,
                "d_ff" => m.d_ff = int()?,
                "max_seq_len" => m.max_seq_len = int()?,
                "tie_embeddings" => {
                    m.tie_embeddings = value
                        .parse()
                        .map_err(|_| err(format!("`tie_embeddings` must be true or false, got `{value}`")))?
                }
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        spec.model.validate().map_err(|e| SpecError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}
