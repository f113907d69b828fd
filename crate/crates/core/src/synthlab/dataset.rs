//! The stage-1 training corpus: originals, augmented normals and defect images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::{augment_with, AugmentConfig};
use super::defect::{generate_defect_in, DefectSpec};
use super::morphology::locate_brain_default;
use crate::error::{ConsultError, Result};
use crate::image::{DefectMask, GrayImage};
use crate::seed::{derive_seed, rng_from, TAG_AUGMENT, TAG_DATASET, TAG_DEFECT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Aug,
    Defect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalEntry {
    pub image: GrayImage,
    pub provenance: Provenance,
    /// Index into `few` this entry descends from.
    pub source: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalousEntry {
    pub image: GrayImage,
    pub mask: DefectMask,
    /// Index into `normals` the defect was inpainted into.
    pub source: usize,
    pub seed: u64,
}

/// `normals` holds the originals first (flagged [`Provenance::Original`]),
/// followed by the augmented images.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub few: Vec<GrayImage>,
    pub normals: Vec<NormalEntry>,
    pub anomalous: Vec<AnomalousEntry>,
}

impl PairedDataset {
    pub fn originals(&self) -> impl Iterator<Item = (usize, &NormalEntry)> {
        self.normals
            .iter()
            .enumerate()
            .filter(|(_, e)| e.provenance == Provenance::Original)
    }

    pub fn pseudo_normal(&self) -> impl Iterator<Item = &NormalEntry> {
        self.normals.iter().filter(|e| e.provenance == Provenance::Aug)
    }

    pub fn original_count(&self) -> usize {
        self.originals().count()
    }

    /// Writes PNGs plus a `manifest.json` sidecar listing every entry.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        for (i, e) in self.normals.iter().enumerate() {
            let id = format!("normal_{i:04}");
            e.image.save_png(dir.join(format!("{id}.png")))?;
            manifest.push(ManifestEntry {
                id,
                provenance: e.provenance,
                seed: e.seed,
                mask_path: None,
            });
        }
        for (i, e) in self.anomalous.iter().enumerate() {
            let id = format!("defect_{i:04}");
            let mask_path = format!("{id}_mask.png");
            e.image.save_png(dir.join(format!("{id}.png")))?;
            e.mask.save_png(dir.join(&mask_path))?;
            manifest.push(ManifestEntry {
                id,
                provenance: Provenance::Defect,
                seed: e.seed,
                mask_path: Some(mask_path),
            });
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub provenance: Provenance,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_path: Option<String>,
}

/// Augments `n_normal_aug` images drawn uniformly from `few`, then inpaints
/// `n_anomalous` defects, each into an image drawn uniformly from all normals.
pub fn build_pair_dataset(
    few: &[GrayImage],
    n_normal_aug: usize,
    n_anomalous: usize,
    spec: &DefectSpec,
    rng_seed: u64,
) -> Result<PairedDataset> {
    build_pair_dataset_with(few, n_normal_aug, n_anomalous, spec, &AugmentConfig::default(), rng_seed)
}

pub fn build_pair_dataset_with(
    few: &[GrayImage],
    n_normal_aug: usize,
    n_anomalous: usize,
    spec: &DefectSpec,
    augment: &AugmentConfig,
    rng_seed: u64,
) -> Result<PairedDataset> {
    use rand::Rng;
    if few.is_empty() {
        return Err(ConsultError::InvalidArgument("few-shot set is empty".into()));
    }
    spec.validate()?;
    let mut rng = rng_from(derive_seed(rng_seed, TAG_DATASET, 0));
    let mut normals: Vec<NormalEntry> = few
        .iter()
        .enumerate()
        .map(|(i, img)| NormalEntry {
            image: img.clone(),
            provenance: Provenance::Original,
            source: i,
            seed: rng_seed,
        })
        .collect();

    let aug_jobs: Vec<(usize, u64)> = (0..n_normal_aug)
        .map(|i| (rng.random_range(0..few.len()), derive_seed(rng_seed, TAG_AUGMENT, i as u64)))
        .collect();
    let augmented = crate::par::par_map!(aug_jobs, |&(src, seed)| NormalEntry {
        image: augment_with(&few[src], seed, augment),
        provenance: Provenance::Aug,
        source: src,
        seed,
    });
    normals.extend(augmented);

    let defect_jobs: Vec<(usize, u64)> = (0..n_anomalous)
        .map(|i| (rng.random_range(0..normals.len()), derive_seed(rng_seed, TAG_DEFECT, i as u64)))
        .collect();
    let anomalous = crate::par::par_map!(defect_jobs, |&(src, seed)| -> Result<AnomalousEntry> {
        let base = &normals[src].image;
        let brain = locate_brain_default(base)?;
        let (image, mask) = generate_defect_in(base, &brain, &spec.with_seed(seed))?;
        Ok(AnomalousEntry {
            image,
            mask,
            source: src,
            seed,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(PairedDataset {
        few: few.to_vec(),
        normals,
        anomalous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brain(n: usize, shift: f64) -> GrayImage {
        let c = n as f64 / 2.0;
        GrayImage::from_fn_clamped(n, n, |y, x| {
            let d = ((y as f64 - c).powi(2) + (x as f64 - c - shift).powi(2)).sqrt();
            if d < n as f64 * 0.38 {
                110.0 + 30.0 * ((y as f64) * 0.4).sin()
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn counts_and_flags() {
        let few = vec![brain(48, 0.0), brain(48, 2.0)];
        let ds = build_pair_dataset(&few, 8, 8, &DefectSpec::default(), 7).unwrap();
        assert_eq!(ds.normals.len(), 10);
        assert_eq!(ds.anomalous.len(), 8);
        assert_eq!(ds.original_count(), 2);
        assert_eq!(ds.pseudo_normal().count(), 8);
        assert!(ds.anomalous.iter().all(|a| a.mask.area() > 0));
        for (i, e) in ds.originals() {
            assert_eq!(e.image, few[i]);
        }
    }

    #[test]
    fn no_augmentation_keeps_few_exactly() {
        let few = vec![brain(48, 0.0), brain(48, 3.0)];
        let ds = build_pair_dataset(&few, 0, 2, &DefectSpec::default(), 1).unwrap();
        let normals: Vec<_> = ds.normals.iter().map(|e| e.image.clone()).collect();
        assert_eq!(normals, few);
    }

    #[test]
    fn seeded_dataset_is_reproducible() {
        let few = vec![brain(48, 0.0), brain(48, 1.0)];
        let a = build_pair_dataset(&few, 4, 4, &DefectSpec::default(), 99).unwrap();
        let b = build_pair_dataset(&few, 4, 4, &DefectSpec::default(), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_few_is_rejected() {
        assert!(build_pair_dataset(&[], 1, 1, &DefectSpec::default(), 0).is_err());
    }

    #[test]
    fn writes_manifest() {
        let few = vec![brain(48, 0.0)];
        let ds = build_pair_dataset(&few, 2, 2, &DefectSpec::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_to(dir.path()).unwrap();
        let m: Vec<ManifestEntry> =
            serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.iter().filter(|e| e.provenance == Provenance::Original).count(), 1);
        let d = m.iter().find(|e| e.provenance == Provenance::Defect).unwrap();
        let mask = DefectMask::load_png(dir.path().join(d.mask_path.as_ref().unwrap())).unwrap();
        assert!(mask.area() > 0);
    }
}
