//! Provenance sidecars written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_hash: String,
    pub inputs: Vec<InputHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunMeta {
    pub fn new(command: &'static str, seed: u64) -> Self {
        Self {
            tool: "lanedep",
            tool_version: TOOL_VERSION,
            command,
            seed,
            config_hash: sha256_hex(b"null"),
            inputs: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(mut self, config: &T) -> anyhow::Result<Self> {
        self.config_hash = sha256_hex(&serde_json::to_vec(config)?);
        Ok(self)
    }

    pub fn inputs(mut self, paths: &[PathBuf]) -> anyhow::Result<Self> {
        for p in paths {
            let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            self.inputs.push(InputHash {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(self)
    }

    /// Writes `<file>.meta.json` beside an output file.
    pub fn write_for(&self, output: &Path) -> anyhow::Result<()> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        self.write(&output.with_file_name(name))
    }

    /// Writes `meta.json` inside an output directory.
    pub fn write_in(&self, dir: &Path) -> anyhow::Result<()> {
        self.write(&dir.join("meta.json"))
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
