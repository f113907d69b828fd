use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::phantom::PhantomConfig;
use crate::bank::{hex, BankConfig};
use crate::error::{ConsultError, Result};
use crate::extractor::ExtractorConfig;
use crate::trainer::TrainConfig;

/// Where the healthy pool and the test split come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Phantom(PhantomConfig),
    /// PNG folders. Masks are matched to anomalous images by file name.
    Directory {
        train_healthy: PathBuf,
        test_healthy: PathBuf,
        test_anomalous: PathBuf,
        #[serde(default)]
        test_masks: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Phantom(PhantomConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shots: usize,
    /// Master seed. The split, synthesis, initialisation, training and bank
    /// streams are all derived from it.
    pub seed: u64,
    pub data: DataSource,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub bank: BankConfig,
    /// Score with the initial weights (plain memory-bank baseline).
    pub skip_training: bool,
    /// Number of test overlays to write.
    pub heatmaps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shots: 2,
            seed: 0,
            data: DataSource::default(),
            extractor: ExtractorConfig::default(),
            train: TrainConfig::default(),
            bank: BankConfig::default(),
            skip_training: false,
            heatmaps: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConsultError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConsultError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(ConsultError::Config("shots must be at least 1".into()));
        }
        if let DataSource::Phantom(p) = &self.data {
            if p.size < 32 {
                return Err(ConsultError::Config("phantom size must be at least 32".into()));
            }
            if p.pool_size < self.shots {
                return Err(ConsultError::Config(format!(
                    "phantom pool of {} cannot supply {} shots",
                    p.pool_size, self.shots
                )));
            }
        }
        self.extractor.validate()?;
        self.train.validate()?;
        self.bank.validate()
    }

    /// The configuration as actually run: the training stream follows the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c
    }

    /// SHA-256 of the resolved configuration's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serialises");
        hex(&Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_defaults() {
        let c = ExperimentConfig::from_json(r#"{"shots": 4, "extractor": {"use_attention": false}}"#).unwrap();
        assert_eq!(c.shots, 4);
        assert!(!c.extractor.use_attention);
        assert_eq!(c.train, TrainConfig::default());
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_json(r#"{"shot": 4}"#).is_err());
        let d = ExperimentConfig::from_json(
            r#"{"data": {"directory": {"train_healthy": "a", "test_healthy": "b", "test_anomalous": "c"}}}"#,
        )
        .unwrap();
        assert!(matches!(d.data, DataSource::Directory { test_masks: None, .. }));
    }

    #[test]
    fn hash_tracks_every_switch() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.extractor.use_attention = false;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert!(ExperimentConfig { shots: 0, ..a }.validate().is_err());
    }
}
