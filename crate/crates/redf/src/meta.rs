//! `run_meta.json`: what a command was run with, so identical metadata
//! implies identical outputs.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use redf_core::Config;

use crate::error::{Result, RunError};

/// Git-style object id of a blob: `sha256("blob <len>\0" || bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InputDigest {
    pub path: String,
    pub blob: String,
}

/// Per-file blob ids plus a tree-style digest over `name blob` lines.
pub fn hash_inputs(paths: &[&Path]) -> Result<(Vec<InputDigest>, String)> {
    let mut digests = Vec::with_capacity(paths.len());
    let mut tree = String::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| RunError::io(p, e))?;
        let blob = blob_hash(&bytes);
        let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        tree.push_str(&format!("{name} {blob}\n"));
        digests.push(InputDigest { path: p.display().to_string(), blob });
    }
    Ok((digests, blob_hash(tree.as_bytes())))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config: serde_json::Map<String, serde_json::Value>,
    pub inputs: Vec<InputDigest>,
    pub content_hash: String,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RunMeta {
    pub fn new(command: &str, config: &Config, inputs: &[&Path]) -> Result<Self> {
        let (inputs, content_hash) = hash_inputs(inputs)?;
        let map = config.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect();
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config: map,
            inputs,
            content_hash,
            extra: serde_json::Map::new(),
        })
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        crate::csv::write(&dir.join("run_meta.json"), &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_is_git_style() {
        // sha256 of "blob 0\0"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }
}
