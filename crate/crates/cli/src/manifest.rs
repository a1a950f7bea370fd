use std::path::{Path, PathBuf};

use anyhow::Result;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::VERSION;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| hkgx_core::Error::io(path, e))?;
        Ok(Self::of_bytes(path.display().to_string(), &bytes))
    }
}

/// Everything needed to rerun a subcommand: resolved configuration, seed,
/// input digests, toolkit version and wall-clock bounds.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_owned(),
            version: VERSION.to_owned(),
            args: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, json).map_err(|e| hkgx_core::Error::io(path, e))?;
        log::info!("event=manifest path={}", path.display());
        Ok(path.to_path_buf())
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
