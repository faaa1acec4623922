//! Sidecar manifests recording how each artifact was produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{read_json, write_json};

/// Crate version and the `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CMMP_GIT_DESCRIBE"), ")");

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a directory tree: file paths relative to `root`, sorted, each
/// followed by its content hash.
pub fn sha256_tree(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        for e in entries {
            let path = e.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("walked under root");
        h.update(rel.to_string_lossy().as_bytes());
        h.update(b"\0");
        h.update(sha256_file(&f)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    /// Input name to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of the split file the artifact depends on, when it does.
    pub split_hash: Option<String>,
    /// Command options that change the artifact beyond the config.
    pub options: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, sections: &[&str]) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_hash: cfg.hash(sections),
            inputs: BTreeMap::new(),
            split_hash: None,
            options: BTreeMap::new(),
            config: cfg.as_map().clone(),
        }
    }

    pub fn input(mut self, name: &str, hash: String) -> Self {
        self.inputs.insert(name.to_string(), hash);
        self
    }

    /// Sidecar path of `artifact`: `<artifact>.manifest.json`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().expect("artifact has a file name").to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write_for(&self, artifact: &Path) -> Result<()> {
        write_json(&Self::path_for(artifact), self)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_for(artifact: &Path) -> Result<Self> {
        read_json(&Self::path_for(artifact))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("split.json");
        std::fs::write(&art, "{}").unwrap();
        let m = Manifest::new("split", &RunConfig::default(), &["split"]).input("x", sha256_file(&art).unwrap());
        m.write_for(&art).unwrap();
        assert!(dir.path().join("split.json.manifest.json").exists());
        assert_eq!(Manifest::read_for(&art).unwrap(), m);
    }

    #[test]
    fn tree_hash_sees_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x"), "1").unwrap();
        let h1 = sha256_tree(dir.path()).unwrap();
        std::fs::write(dir.path().join("a/x"), "2").unwrap();
        let h2 = sha256_tree(dir.path()).unwrap();
        std::fs::rename(dir.path().join("a/x"), dir.path().join("a/y")).unwrap();
        let h3 = sha256_tree(dir.path()).unwrap();
        assert!(h1 != h2 && h2 != h3);
    }
}
