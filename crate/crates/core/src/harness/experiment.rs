//! The few-shot protocol end to end, and ablation sweeps over it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::audit::{AuditedStore, Split, Stage};
use super::config::{DataSource, ExperimentConfig};
use super::manifest::GIT_DESCRIBE;
use super::metrics::{auroc, split_few_shot};
use super::phantom::{generate_surrogate, Label};
use crate::bank::{calibrate_tau, extractor_fingerprint, hex, save_overlay, AnomalyMap, MemoryBank};
use crate::error::{ConsultError, Result};
use crate::extractor::{initial_weights, Activation, Extractor};
use crate::image::{DefectMask, GrayImage};
use crate::losses::ContrastiveKind;
use crate::nn::WeightSet;
use crate::synthlab::{build_pair_dataset_with, PairedDataset};
use crate::trainer::{train_stage1, write_stats_csv, EpochStats, PullAudit, TrainSink};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub label: Label,
    pub score: f64,
    pub raw_score: f64,
    pub is_anomaly: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// AUROC over reweighted image scores.
    pub auroc: f64,
    /// AUROC over the plain maximum patch distance.
    pub auroc_raw: f64,
    /// Decision threshold, a quantile of pseudo-normal training scores.
    pub tau: f64,
    pub n_healthy: usize,
    pub n_anomalous: usize,
    pub few_ids: Vec<String>,
    pub scores: Vec<ImageScore>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub git_describe: String,
    pub runtime_seconds: f64,
    pub fingerprint: String,
    pub init: String,
    pub bank_size: usize,
    pub epochs_trained: usize,
    pub pull_audit: Option<PullAudit>,
    /// No test image was opened before scoring.
    pub audit_clean: bool,
}

/// Everything a run produced, for callers that need more than the report.
pub struct ExperimentRun {
    pub report: MetricsReport,
    pub weights: WeightSet,
    pub init_weights: WeightSet,
    pub bank: MemoryBank,
    pub stats: Vec<EpochStats>,
    pub few: Vec<GrayImage>,
    pub dataset: PairedDataset,
    /// Test images with their masks, in report order.
    pub test: Vec<(String, GrayImage, Label, Option<DefectMask>)>,
}

#[derive(Serialize)]
struct PartialState<'a> {
    failed_stage: &'a str,
    error: String,
    completed: &'a [&'static str],
    config_hash: String,
    few_ids: &'a [String],
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ConsultError::Data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(ConsultError::Data(format!("no PNG files in {}", dir.display())));
    }
    Ok(out)
}

fn file_id(prefix: &str, p: &Path) -> String {
    format!("{prefix}/{}", p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default())
}

/// Builds the audited store for the configured data source.
pub fn open_store(cfg: &ExperimentConfig) -> Result<AuditedStore> {
    let mut store = AuditedStore::new();
    match &cfg.data {
        DataSource::Phantom(p) => {
            let data = generate_surrogate(p, cfg.seed)?;
            for (i, img) in data.pool.into_iter().enumerate() {
                store.insert_image(format!("pool_{i:04}"), Split::Train, Label::Healthy, img, None)?;
            }
            for t in data.test {
                store.insert_image(t.id, Split::Test, t.label, t.image, t.mask)?;
            }
        }
        DataSource::Directory {
            train_healthy,
            test_healthy,
            test_anomalous,
            test_masks,
        } => {
            for p in png_files(train_healthy)? {
                store.insert_file(file_id("train", &p), Split::Train, Label::Healthy, p, None)?;
            }
            for p in png_files(test_healthy)? {
                store.insert_file(file_id("test_healthy", &p), Split::Test, Label::Healthy, p, None)?;
            }
            for p in png_files(test_anomalous)? {
                let mask = test_masks
                    .as_ref()
                    .map(|d| d.join(p.file_name().unwrap_or_default()))
                    .filter(|m| m.exists());
                store.insert_file(file_id("test_anomalous", &p), Split::Test, Label::Anomalous, p, mask)?;
            }
        }
    }
    Ok(store)
}

/// Draws the K shots from the healthy training pool and loads them.
pub fn few_shots(store: &AuditedStore, cfg: &ExperimentConfig) -> Result<(Vec<String>, Vec<GrayImage>)> {
    store.set_stage(Stage::Split);
    let pool = store.ids(Split::Train);
    let (chosen, _) = split_few_shot(pool.len(), cfg.shots, cfg.seed)?;
    let ids: Vec<String> = chosen.iter().map(|&i| pool[i].clone()).collect();
    let few = ids.iter().map(|id| store.load(id).map(|l| l.image)).collect::<Result<Vec<_>>>()?;
    Ok((ids, few))
}

/// Runs the protocol and returns its report. Outputs go to `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<MetricsReport> {
    execute(cfg, out_dir).map(|r| r.report)
}

/// Like [`run_experiment`] but keeps the weights, bank and training stats.
/// On failure the error names the stage, and `partial_state.json` is written.
pub fn execute(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentRun> {
    let mut completed = Vec::new();
    let mut few_ids = Vec::new();
    let mut current = "config";
    let result = execute_inner(cfg, out_dir, &mut completed, &mut few_ids, &mut current);
    match result {
        Ok(r) => Ok(r),
        Err(e) => {
            let e = e.in_stage(current);
            if let Some(dir) = out_dir {
                let state = PartialState {
                    failed_stage: current,
                    error: e.to_string(),
                    completed: &completed,
                    config_hash: cfg.hash(),
                    few_ids: &few_ids,
                };
                fs::create_dir_all(dir)?;
                fs::write(dir.join("partial_state.json"), serde_json::to_string_pretty(&state)?)?;
            }
            Err(e)
        }
    }
}

fn execute_inner(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    completed: &mut Vec<&'static str>,
    few_ids: &mut Vec<String>,
    current: &mut &'static str,
) -> Result<ExperimentRun> {
    let start = Instant::now();
    cfg.validate()?;
    let cfg = cfg.resolved();
    let seed = cfg.seed;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    completed.push("config");

    *current = "split";
    let store = open_store(&cfg)?;
    let (ids, few) = few_shots(&store, &cfg)?;
    *few_ids = ids;
    completed.push("split");

    *current = "synth";
    store.set_stage(Stage::Synth);
    let t = &cfg.train;
    let dataset = build_pair_dataset_with(&few, t.n_normal_aug, t.n_anomalous, &t.defect, &t.augment, seed)?;
    completed.push("synth");

    *current = "train";
    store.set_stage(Stage::Train);
    let init = initial_weights(&cfg.extractor, seed, &few)?;
    let init_id = init.metadata.get("init").cloned().unwrap_or_else(|| format!("he-normal:{seed}"));
    let (weights, stats, pull_audit) = if cfg.skip_training {
        (init.clone(), Vec::new(), None)
    } else {
        let sink = out_dir.map(TrainSink::new).transpose()?;
        let out = train_stage1(&dataset, &cfg.extractor, t, &init, sink.as_ref())?;
        (out.weights, out.stats, Some(out.audit))
    };
    if let Some(dir) = out_dir {
        if cfg.skip_training {
            write_stats_csv(&dir.join("epoch_stats.csv"), &stats)?;
        }
        weights.save(dir.join("weights.cwt"))?;
    }
    completed.push("train");

    *current = "bank";
    store.set_stage(Stage::Bank);
    let extractor = Extractor::new(&cfg.extractor, &weights)?;
    let fingerprint = extractor_fingerprint(&weights, &cfg.extractor);
    let bank = MemoryBank::from_grids(&extractor.grids(&few)?, fingerprint, &cfg.bank, seed)?;
    let pseudo: Vec<GrayImage> = dataset.pseudo_normal().map(|e| e.image.clone()).collect();
    let calib = if pseudo.is_empty() { &few } else { &pseudo };
    let calib_scores = crate::par::par_map!(calib, |img: &GrayImage| score_with(&extractor, &bank, img, &cfg))
        .into_iter()
        .map(|m| m.map(|m| m.image_score))
        .collect::<Result<Vec<_>>>()?;
    let tau = calibrate_tau(&calib_scores, cfg.bank.tau_quantile)?;
    if let Some(dir) = out_dir {
        bank.save(dir.join("bank.cslt"))?;
    }
    completed.push("bank");

    *current = "score";
    store.set_stage(Stage::Score);
    let test_ids = store.ids(Split::Test);
    let loaded = test_ids.iter().map(|id| store.load(id)).collect::<Result<Vec<_>>>()?;
    let maps = crate::par::par_map!(loaded, |l: &super::audit::Loaded| score_with(&extractor, &bank, &l.image, &cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        write_heatmaps(dir, &loaded, &maps, cfg.heatmaps)?;
    }
    completed.push("score");

    *current = "eval";
    store.set_stage(Stage::Eval);
    let scores: Vec<ImageScore> = loaded
        .iter()
        .zip(&maps)
        .map(|(l, m)| ImageScore {
            id: l.id.clone(),
            label: l.label,
            score: m.image_score,
            raw_score: m.raw_score,
            is_anomaly: m.image_score > tau,
        })
        .collect();
    let labels: Vec<bool> = scores.iter().map(|s| s.label == Label::Anomalous).collect();
    let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let r: Vec<f64> = scores.iter().map(|s| s.raw_score).collect();
    let report = MetricsReport {
        auroc: auroc(&s, &labels)?,
        auroc_raw: auroc(&r, &labels)?,
        tau,
        n_healthy: labels.iter().filter(|&&a| !a).count(),
        n_anomalous: labels.iter().filter(|&&a| a).count(),
        few_ids: few_ids.clone(),
        scores,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        git_describe: GIT_DESCRIBE.to_string(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        fingerprint: hex(&fingerprint),
        init: init_id,
        bank_size: bank.len(),
        epochs_trained: stats.len(),
        pull_audit,
        audit_clean: store.is_clean(),
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("metrics_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    completed.push("eval");

    let test = loaded.into_iter().map(|l| (l.id, l.image, l.label, l.mask)).collect();
    Ok(ExperimentRun {
        report,
        weights,
        init_weights: init,
        bank,
        stats,
        few,
        dataset,
        test,
    })
}

fn score_with(extractor: &Extractor, bank: &MemoryBank, img: &GrayImage, cfg: &ExperimentConfig) -> Result<AnomalyMap> {
    let grid = extractor.grid(img)?;
    bank.score_grid(&grid, (img.height(), img.width()), cfg.bank.blur_sigma)
}

/// Overlays for up to `n` test images, alternating between the classes, on a
/// shared colour scale.
fn write_heatmaps(dir: &Path, loaded: &[super::audit::Loaded], maps: &[AnomalyMap], n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let hm = dir.join("heatmaps");
    fs::create_dir_all(&hm)?;
    let healthy = (0..loaded.len()).filter(|&i| loaded[i].label == Label::Healthy);
    let anomalous = (0..loaded.len()).filter(|&i| loaded[i].label == Label::Anomalous);
    let mut picks: Vec<usize> = anomalous.take(n.div_ceil(2)).collect();
    picks.extend(healthy.take(n - picks.len().min(n)));
    picks.truncate(n);
    let vmax = picks
        .iter()
        .flat_map(|&i| maps[i].upsampled.iter().copied())
        .fold(0.0f64, f64::max);
    for i in picks {
        let name = loaded[i].id.replace('/', "_");
        let name = name.strip_suffix(".png").unwrap_or(&name);
        save_overlay(&loaded[i].image, &maps[i], Some(vmax), hm.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// One cell of an ablation sweep. Unset switches keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepCell {
    pub loss: Option<ContrastiveKind>,
    pub ssl: Option<bool>,
    pub koleo: Option<bool>,
    pub depth: Option<u32>,
    pub attention: Option<bool>,
    pub activation: Option<Activation>,
    pub shots: Option<usize>,
}

impl SweepCell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        if let Some(v) = self.loss {
            c.train.objective.loss = v;
        }
        if let Some(v) = self.ssl {
            c.train.objective.use_ssl = v;
        }
        if let Some(v) = self.koleo {
            c.train.objective.use_koleo = v;
        }
        if let Some(v) = self.depth {
            c.extractor.backbone_depth = v;
        }
        if let Some(v) = self.attention {
            c.extractor.use_attention = v;
        }
        if let Some(v) = self.activation {
            c.extractor.activation = v;
        }
        if let Some(v) = self.shots {
            c.shots = v;
        }
        c
    }
}

/// Axes of a cartesian sweep. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub loss: Vec<ContrastiveKind>,
    pub ssl: Vec<bool>,
    pub koleo: Vec<bool>,
    pub depth: Vec<u32>,
    pub attention: Vec<bool>,
    pub activation: Vec<Activation>,
    pub shots: Vec<usize>,
}

fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().copied().map(Some).collect()
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for loss in axis(&self.loss) {
            for ssl in axis(&self.ssl) {
                for koleo in axis(&self.koleo) {
                    for depth in axis(&self.depth) {
                        for attention in axis(&self.attention) {
                            for activation in axis(&self.activation) {
                                for shots in axis(&self.shots) {
                                    out.push(SweepCell {
                                        loss,
                                        ssl,
                                        koleo,
                                        depth,
                                        attention,
                                        activation,
                                        shots,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Named sweeps: `loss` (the five loss-function variants) and `model`
/// (backbone depth x attention x activation).
pub fn preset(name: &str) -> Result<Vec<SweepCell>> {
    use ContrastiveKind::{Anchor, Tritanh};
    let loss = |l, s, k| SweepCell {
        loss: Some(l),
        ssl: Some(s),
        koleo: Some(k),
        ..SweepCell::default()
    };
    match name {
        "loss" => Ok(vec![
            loss(Anchor, false, false),
            loss(Tritanh, false, false),
            loss(Tritanh, false, true),
            loss(Tritanh, true, false),
            loss(Tritanh, true, true),
        ]),
        "model" => Ok(SweepGrid {
            depth: vec![18, 50],
            attention: vec![false, true],
            activation: vec![Activation::Relu, Activation::LeakyRelu],
            ..SweepGrid::default()
        }
        .cells()),
        other => Err(ConsultError::Config(format!("unknown sweep preset `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: String,
    pub ssl: bool,
    pub koleo: bool,
    pub depth: u32,
    pub attention: bool,
    pub activation: String,
    pub shots: usize,
    pub auroc: Option<f64>,
    pub auroc_raw: Option<f64>,
    pub config_hash: String,
    pub status: String,
}

fn tag<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub struct SweepResult {
    pub row: SweepRow,
    pub report: Option<MetricsReport>,
}

/// One experiment per cell, in order. A failing cell is recorded and the
/// sweep moves on. With `out_dir`, each cell writes to `cell_NN/` and the
/// table goes to `ablation.csv`.
pub fn sweep_ablation(base: &ExperimentConfig, cells: &[SweepCell], out_dir: Option<&Path>) -> Result<Vec<SweepResult>> {
    if cells.is_empty() {
        return Err(ConsultError::Config("sweep grid is empty".into()));
    }
    let mut results = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let cfg = cell.apply(base);
        let dir = out_dir.map(|d| d.join(format!("cell_{i:02}")));
        let outcome = run_experiment(&cfg, dir.as_deref());
        if let Err(e) = &outcome {
            log::warn!("sweep cell {i} failed: {e}");
        }
        let (auroc, auroc_raw, status) = match &outcome {
            Ok(r) => (Some(r.auroc), Some(r.auroc_raw), "ok".to_string()),
            Err(e) => (None, None, format!("error: {e}")),
        };
        let o = &cfg.train.objective;
        results.push(SweepResult {
            row: SweepRow {
                loss: tag(&o.loss),
                ssl: o.use_ssl,
                koleo: o.use_koleo,
                depth: cfg.extractor.backbone_depth,
                attention: cfg.extractor.use_attention,
                activation: tag(&cfg.extractor.activation),
                shots: cfg.shots,
                auroc,
                auroc_raw,
                config_hash: cfg.hash(),
                status,
            },
            report: outcome.ok(),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for r in &results {
            w.serialize(&r.row)?;
        }
        w.flush()?;
    }
    Ok(results)
}
