use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// `manifest.toml` of a run directory: what produced it and the artifacts
/// it holds (relative path -> SHA-256).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub commands: Vec<String>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// The existing manifest of `dir`, or a fresh one.
    pub fn open(dir: &Path, seed: u64, config_hash: &[u8; 32]) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: Self = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if m.config_hash != hex::encode(config_hash) || m.seed != seed {
                log::warn!(
                    "{} was written by another seed or config; updating it",
                    path.display()
                );
            }
            return Ok(Self {
                seed,
                config_hash: hex::encode(config_hash),
                ..m
            });
        }
        Ok(Self {
            seed,
            config_hash: hex::encode(config_hash),
            ..Self::default()
        })
    }

    pub fn record(&mut self, command: &str, artifacts: impl IntoIterator<Item = (String, String)>) {
        self.commands.push(command.to_string());
        self.artifacts.extend(artifacts);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reopen_appends() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open(dir.path(), 1, &[0; 32]).unwrap();
        m.record("search", [("search.ckpt".to_string(), "ab".to_string())]);
        m.save(dir.path()).unwrap();
        let mut m = RunManifest::open(dir.path(), 1, &[0; 32]).unwrap();
        m.record("meta-init", [("meta.ckpt".to_string(), "cd".to_string())]);
        assert_eq!(m.commands, ["search", "meta-init"]);
        assert_eq!(m.artifacts.len(), 2);
    }
}
