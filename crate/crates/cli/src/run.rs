//! Run directory bookkeeping: outputs plus a manifest recording the config
//! snapshot, input/output hashes and tool versions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    versions: BTreeMap<&'static str, &'static str>,
    config: RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records the hash of an input file.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs
            .insert(name.to_string(), hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(path)
    }

    /// Registers a file some library call already wrote into the run directory.
    pub fn written(&mut self, name: &str) -> anyhow::Result<()> {
        let hash = sha256_file(&self.path(name))?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    /// Registers an output written outside the run directory.
    pub fn external(&mut self, path: &Path) -> anyhow::Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn finish(self, config: &RunConfig, argv: &[String]) -> anyhow::Result<PathBuf> {
        let manifest = Manifest {
            command: &self.command,
            argv,
            versions: [
                ("phenokg", phenokg::VERSION),
                ("phenokg-cli", env!("CARGO_PKG_VERSION")),
            ]
            .into(),
            config: config.redacted(),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let path = self.path("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
