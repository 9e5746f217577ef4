use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written last into its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    /// Flags given on the command line, which override `config`.
    pub flags: BTreeMap<String, String>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// An output directory that refuses to be reused and keeps track of what
/// was written into it.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        if root.join(MANIFEST_FILE).exists() {
            bail!(
                "{} already holds a run; experiment directories are append-only",
                root.display()
            );
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
            inputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn input(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        flags: BTreeMap<String, String>,
        seed: u64,
    ) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: config.clone(),
            flags,
            inputs: std::mem::take(&mut self.inputs),
            seed,
            artifacts: self.artifacts.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}
