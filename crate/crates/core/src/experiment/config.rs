//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! The schema is closed: unknown sections or keys are rejected up front
//! with the offending path, before any work starts. Values are plain
//! scalars or comma-separated lists.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Allowed keys per section.
const SCHEMA: &[(&str, &[&str])] = &[
    ("task", &["kind", "vocab", "min_len", "max_len", "bitext", "mono_src", "mono_tgt", "dev", "test"]),
    (
        "model",
        &["d_model", "n_heads", "d_ffn", "layers", "dropout", "max_len", "tied_embeddings", "shared_vocab"],
    ),
    ("train", &["steps", "batch_size", "lr", "beam", "length_penalty", "decode_max_len"]),
    ("run", &["seed", "stages", "out"]),
    ("bt", &["upsample_bitext", "mono_fraction", "noise_drop", "noise_blank", "noise_swap", "steps"]),
    ("madl", &["agents", "steps", "bitext_batch", "mono_batch", "mono_fraction", "refresh_every", "agent_steps"]),
    ("mass", &["steps", "ratio", "batch_size", "finetune_steps", "supervised"]),
    ("sca", &["gamma", "temperature", "lm_steps", "steps"]),
    ("kd", &["steps"]),
    ("finetune_clean", &["corrupt_fraction", "corrupt_rate", "steps"]),
    ("rerank", &["beam", "grid_steps", "lambda_grid", "extra_seed"]),
    (
        "nao",
        &["pool", "iterations", "top_k", "eta", "budget", "eval_batch", "d_arch", "surrogate_epochs", "train_steps"],
    ),
    ("speculation", &["max_epochs"]),
];

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim().to_string();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config {
                        path: name.clone(),
                        msg: format!("unknown section (line {})", ln + 1),
                    });
                }
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    path: format!("line {}", ln + 1),
                    msg: "expected 'key = value'".to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let Some(section) = current.clone() else {
                return Err(Error::Config {
                    path: key,
                    msg: format!("key outside any section (line {})", ln + 1),
                });
            };
            let allowed = SCHEMA.iter().find(|(s, _)| *s == section).unwrap().1;
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config {
                    path: format!("{section}.{key}"),
                    msg: "unknown key".to_string(),
                });
            }
            let entry = sections.get_mut(&section).unwrap();
            if entry.insert(key.clone(), value).is_some() {
                return Err(Error::Config {
                    path: format!("{section}.{key}"),
                    msg: "duplicate key".to_string(),
                });
            }
        }
        Ok(ExperimentConfig { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(String::as_str)
    }

    fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| Error::Config {
            path: format!("{section}.{key}"),
            msg: format!("cannot parse value {raw:?}"),
        })
    }

    pub fn get<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(raw) => self.parse_value(section, key, raw),
        }
    }

    pub fn get_string(&self, section: &str, key: &str, default: &str) -> String {
        self.raw(section, key).unwrap_or(default).to_string()
    }

    pub fn get_list(&self, section: &str, key: &str, default: &[&str]) -> Vec<String> {
        match self.raw(section, key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(raw) => raw
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn get_f64_list(&self, section: &str, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(section, key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| self.parse_value(section, key, s.trim()))
                .collect(),
        }
    }

    /// Override a value programmatically (seed flags and the like).
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }
}
