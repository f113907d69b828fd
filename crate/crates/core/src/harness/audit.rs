//! Image store that refuses test-split access while training-side stages run.

use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::phantom::Label;
use crate::error::{ConsultError, Result};
use crate::image::{DefectMask, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Split,
    Synth,
    Train,
    Bank,
    Score,
    Eval,
}

impl Stage {
    /// Stages that must never see test data.
    pub fn is_guarded(self) -> bool {
        matches!(self, Stage::Synth | Stage::Train | Stage::Bank)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Bank => "bank",
            Stage::Score => "score",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug)]
enum Payload {
    Memory {
        image: GrayImage,
        mask: Option<DefectMask>,
    },
    File {
        path: PathBuf,
        mask: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct Entry {
    id: String,
    split: Split,
    label: Label,
    payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub id: String,
    pub split: Split,
    pub stage: Stage,
}

/// A loaded image with its label and optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
    pub mask: Option<DefectMask>,
}

pub struct AuditedStore {
    entries: Vec<Entry>,
    stage: Mutex<Stage>,
    log: Mutex<Vec<AccessRecord>>,
}

impl Default for AuditedStore {
    fn default() -> Self {
        Self::new()
    }
}

impl AuditedStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            stage: Mutex::new(Stage::Split),
            log: Mutex::new(Vec::new()),
        }
    }

    fn push(&mut self, id: String, split: Split, label: Label, payload: Payload) -> Result<()> {
        if self.entries.iter().any(|e| e.id == id) {
            return Err(ConsultError::Data(format!("duplicate image id `{id}`")));
        }
        self.entries.push(Entry {
            id,
            split,
            label,
            payload,
        });
        Ok(())
    }

    pub fn insert_image(
        &mut self,
        id: impl Into<String>,
        split: Split,
        label: Label,
        image: GrayImage,
        mask: Option<DefectMask>,
    ) -> Result<()> {
        self.push(id.into(), split, label, Payload::Memory { image, mask })
    }

    pub fn insert_file(
        &mut self,
        id: impl Into<String>,
        split: Split,
        label: Label,
        path: PathBuf,
        mask: Option<PathBuf>,
    ) -> Result<()> {
        self.push(id.into(), split, label, Payload::File { path, mask })
    }

    pub fn set_stage(&self, stage: Stage) {
        *self.stage.lock().expect("stage lock") = stage;
    }

    pub fn stage(&self) -> Stage {
        *self.stage.lock().expect("stage lock")
    }

    /// Ids of one split, in insertion order. Listing does not open any file.
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.id.clone()).collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.split)
    }

    pub fn label_of(&self, id: &str) -> Option<Label> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.label)
    }

    pub fn load(&self, id: &str) -> Result<Loaded> {
        let e = self
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| ConsultError::Data(format!("unknown image id `{id}`")))?;
        let stage = self.stage();
        if e.split == Split::Test && stage.is_guarded() {
            return Err(ConsultError::AuditViolation(format!(
                "test image `{id}` opened during the {} stage",
                stage.name()
            )));
        }
        self.log.lock().expect("log lock").push(AccessRecord {
            id: id.to_string(),
            split: e.split,
            stage,
        });
        let (image, mask) = match &e.payload {
            Payload::Memory { image, mask } => (image.clone(), mask.clone()),
            Payload::File { path, mask } => (
                GrayImage::load_png(path)?,
                mask.as_ref().map(DefectMask::load_png).transpose()?,
            ),
        };
        Ok(Loaded {
            id: e.id.clone(),
            image,
            label: e.label,
            mask,
        })
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("log lock").clone()
    }

    /// True when no test image was opened during a guarded stage.
    pub fn is_clean(&self) -> bool {
        self.access_log()
            .iter()
            .all(|r| !(r.split == Split::Test && r.stage.is_guarded()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guarded_stages_refuse_test_images() {
        let img = GrayImage::filled(32, 32, 10.0).unwrap();
        let mut store = AuditedStore::new();
        store.insert_image("a", Split::Train, Label::Healthy, img.clone(), None).unwrap();
        store.insert_image("t", Split::Test, Label::Anomalous, img, None).unwrap();
        for stage in [Stage::Synth, Stage::Train, Stage::Bank] {
            store.set_stage(stage);
            assert!(store.load("a").is_ok());
            assert!(matches!(store.load("t"), Err(ConsultError::AuditViolation(_))));
        }
        store.set_stage(Stage::Score);
        assert!(store.load("t").is_ok());
        assert!(store.is_clean());
        assert_eq!(store.access_log().len(), 4);
        assert!(store.insert_image("a", Split::Train, Label::Healthy, GrayImage::filled(32, 32, 0.0).unwrap(), None).is_err());
    }
}
