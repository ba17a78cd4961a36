//! Provenance stamping for everything a run writes.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> anyhow::Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        let digest = Sha256::digest(&canonical);
        let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { tool: "dyncontrol", version: VERSION, command: command.to_string(), config_sha256, seed: config.run.seed })
    }

    /// Comment lines placed above CSV headers.
    pub fn comments(&self, schema: &str) -> Vec<String> {
        vec![
            format!("{} {} {} schema={schema}/v1", self.tool, self.version, self.command),
            format!("config_sha256={} seed={}", self.config_sha256, self.seed),
        ]
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    provenance: &'a Provenance,
    config: &'a RunConfig,
    result: &'a T,
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `result` wrapped with the provenance and the resolved config.
    pub fn json<T: Serialize>(&self, name: &str, prov: &Provenance, config: &RunConfig, result: &T) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        dyncontrol_core::io::write_json(&path, &Envelope { provenance: prov, config, result })?;
        Ok(path)
    }
}
