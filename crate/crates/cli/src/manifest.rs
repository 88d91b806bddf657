//! Run manifest: what was written, how long each stage took, and solver diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    /// Report family, used by `plotdata`.
    pub kind: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncationFlags {
    pub binding: bool,
    pub y_active: usize,
    pub z_active: usize,
    pub u_active: usize,
    pub k_level: f64,
    pub z_level: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub start_value: f64,
    pub start_stderr: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Estimated contraction factor of the Picard map.
    pub epsilon_hat: f64,
    pub max_condition: f64,
    #[serde(default)]
    pub truncation: Option<TruncationFlags>,
    pub bracket_median: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub solver: Option<SolverDiagnostics>,
    /// Scalar summaries of the studies, keyed `study.quantity`.
    #[serde(default)]
    pub studies: BTreeMap<String, f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Checksums of all artifacts, in manifest order.
    pub fn checksums(&self) -> Vec<(&str, &str)> {
        self.artifacts
            .iter()
            .map(|a| (a.file.as_str(), a.sha256.as_str()))
            .collect()
    }
}

/// Writes artifacts into one directory and records their checksums.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, file: &str, kind: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact {
            file: file.to_string(),
            kind: kind.to_string(),
            sha256: hex(&Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Renders with `f` into memory, then writes.
    pub fn write_with(
        &mut self,
        file: &str,
        kind: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {file}"))?;
        self.write(file, kind, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_records_checksums_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write("a.csv", "nodes", b"x,y\n1,2\n").unwrap();
        assert_eq!(w.artifacts[0].bytes, 8);
        assert_eq!(w.artifacts[0].sha256.len(), 64);
        let m = RunManifest {
            artifacts: w.artifacts.clone(),
            ..Default::default()
        };
        let text = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
