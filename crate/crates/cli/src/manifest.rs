use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use xalign::Result;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one run. Contains no timestamps so identical runs produce
/// identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub toolkit_version: &'static str,
    pub command: Vec<String>,
    pub subcommand: String,
    pub seeds: Vec<u64>,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub struct ManifestBuilder {
    subcommand: String,
    seeds: Vec<u64>,
    config_sha256: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, seeds: Vec<u64>) -> Self {
        Self {
            subcommand: subcommand.into(),
            seeds,
            config_sha256: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config_sha256 = sha256_json(cfg)?;
        Ok(())
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Hashes every recorded file and writes `manifest.json` into `out_dir`.
    pub fn write(self, out_dir: &Path) -> Result<PathBuf> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().skip(1).collect(),
            subcommand: self.subcommand,
            seeds: self.seeds,
            config_sha256: self.config_sha256,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
        };
        let path = out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}
