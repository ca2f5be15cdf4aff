//! Report files and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of the effective configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// `v<crate version>`, followed by `-<describe>` when the build sets
/// `NEOBERT_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("NEOBERT_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Machine-readable record of one run. Wall times go to a separate
/// `timings.json` so that the manifest itself is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub wall_seconds: BTreeMap<String, f64>,
}

/// Collects report files, then writes them with `manifest.json` and
/// `timings.json` into a directory.
#[derive(Clone, Debug, Default)]
pub struct ReportSet {
    files: Vec<(String, Vec<u8>)>,
    /// Files the run wrote itself, such as checkpoints.
    written: Vec<String>,
    pub timings: Timings,
}

impl ReportSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    /// Lists a file already written to the output directory.
    pub fn note_written(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.timings.wall_seconds.insert(phase.to_string(), seconds);
    }

    pub fn names(&self) -> Vec<String> {
        self.written.iter().cloned().chain(self.files.iter().map(|(n, _)| n.clone())).collect()
    }

    pub fn write(&self, dir: &Path, command: &str, seed: u64, config_text: &str) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            command: command.to_string(),
            seed,
            config_hash: config_hash(config_text),
            version: version_string(),
            files: self.names(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("timings.json"), &self.timings)?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let write = |sub: &str, secs: f64| {
            let mut r = ReportSet::new();
            r.add("a.tsv", "x\t1\n");
            r.time("train", secs);
            r.write(&dir.path().join(sub), "pretrain", 7, "[model]\n").unwrap();
            std::fs::read(dir.path().join(sub).join("manifest.json")).unwrap()
        };
        assert_eq!(write("one", 1.0), write("two", 2.0));
        let m: serde_json::Value = serde_json::from_slice(&write("three", 0.5)).unwrap();
        assert_eq!(m["seed"], 7);
        assert_eq!(m["files"][0], "a.tsv");
    }
}
