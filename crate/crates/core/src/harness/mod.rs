//! Few-shot protocol, evaluation, surrogate data and ablation sweeps.

pub mod audit;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod phantom;

pub use audit::{AccessRecord, AuditedStore, Loaded, Split, Stage};
pub use config::{DataSource, ExperimentConfig};
pub use experiment::{
    execute, few_shots, open_store, preset, run_experiment, sweep_ablation, ExperimentRun, ImageScore, MetricsReport, SweepCell,
    SweepGrid, SweepResult, SweepRow,
};
pub use manifest::{Manifest, GIT_DESCRIBE};
pub use metrics::{auroc, split_few_shot};
pub use phantom::{generate_surrogate, implant_tumor, phantom_brain, phantom_brain_with, Label, PhantomConfig, SurrogateData, TestItem};
