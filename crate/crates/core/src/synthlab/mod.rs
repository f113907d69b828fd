//! Stage-1 training corpus synthesis.

pub mod augment;
pub mod bezier;
pub mod dataset;
pub mod defect;
pub mod morphology;

pub use augment::{apply_plan, augment_normal, augment_with, AugmentConfig, AugmentPlan};
pub use bezier::{bezier_hull, fill_polygon, point_in_polygon, polygon_area, Point};
pub use dataset::{
    build_pair_dataset, build_pair_dataset_with, AnomalousEntry, ManifestEntry, NormalEntry, PairedDataset,
    Provenance,
};
pub use defect::{generate_defect, generate_defect_in, DefectSpec};
pub use morphology::{locate_brain, locate_brain_default, Threshold};
