use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Written as `manifest.json` next to the outputs of every run. `argv`
/// replays the run through `rrfb replay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub versions: Versions,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub rrfb: String,
    pub rrfb_core: String,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, config: serde_json::Value, seed: u64, threads: Option<usize>, outputs: Vec<String>) -> Self {
        let hash = Sha256::digest(config.to_string().as_bytes());
        let config_hash = hash.iter().map(|b| format!("{b:02x}")).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            argv,
            config_hash,
            config,
            seed,
            threads,
            versions: Versions { rrfb: env!("CARGO_PKG_VERSION").to_string(), rrfb_core: rrfb_core::VERSION.to_string() },
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}
