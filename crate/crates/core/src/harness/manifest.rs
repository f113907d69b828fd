use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const GIT_DESCRIBE: &str = env!("CONSULT_GIT_DESCRIBE");

/// Written next to every run's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub fingerprints: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub status: String,
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: GIT_DESCRIBE.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config: serde_json::to_value(config)?,
            status: "ok".into(),
            ..Self::default()
        })
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn fingerprint(&mut self, name: &str, value: impl Into<String>) -> &mut Self {
        self.fingerprints.insert(name.into(), value.into());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
