//! Output formats: CSV dialect (comma, header row, LF, floats with 17
//! significant digits) and atomic JSON writes.

use std::fs;
use std::path::Path;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::features::FeatureSet;

/// Round-trippable float formatting with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Git-style content hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// SHA-256 over the feature vectors and probabilities in the CSV float format.
pub fn feature_hash(features: &FeatureSet<f64>) -> String {
    let mut text = String::new();
    for row in features.vectors().rows() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let probs: Vec<String> = features.probs_f64().iter().map(|&x| fmt_f64(x)).collect();
    text.push_str(&probs.join(","));
    sha256_hex(text.as_bytes())
}

/// Record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            version: crate::VERSION.to_string(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            feature_hash: None,
            task_hash: None,
            failures: Vec::new(),
        }
    }

    /// Hash the task family parameters as serialized JSON.
    pub fn with_task<T: Serialize>(mut self, task: &T) -> Result<Self> {
        self.task_hash = Some(content_hash(serde_json::to_string(task)?.as_bytes()));
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
