//! Stage-1 fine-tuning of the extractor on synthesized triples.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConsultError, Result};
use crate::extractor::{aggregate_backward, aggregate_with_shape, is_trainable, Architecture, ExtractorConfig, Network};
use crate::image::{DefectMask, GrayImage};
use crate::losses::{LossBreakdown, Objective};
use crate::nn::{Adam, WeightSet};
use crate::seed::{child_rng, derive_seed, TAG_EPOCH, TAG_TRAIN};
use crate::synthlab::{build_pair_dataset_with, AugmentConfig, DefectSpec, PairedDataset, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub iters_per_epoch: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Parameter-name prefixes excluded from updates, e.g. `"stage1"` or `"stem"`.
    pub frozen_prefix: Vec<String>,
    /// Redraw augmentations and defects from the originals at every epoch.
    pub resynthesize: bool,
    pub n_normal_aug: usize,
    pub n_anomalous: usize,
    pub defect: DefectSpec,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            batch_size: 4,
            iters_per_epoch: 32,
            seed: 0,
            objective: Objective::default(),
            frozen_prefix: Vec::new(),
            resynthesize: true,
            n_normal_aug: 16,
            n_anomalous: 16,
            defect: DefectSpec::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ConsultError::Config("learning_rate must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.iters_per_epoch == 0 {
            return Err(ConsultError::Config("batch_size and iters_per_epoch must be positive".into()));
        }
        self.objective.validate()?;
        self.defect.validate()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefix
            .iter()
            .any(|p| name == p || name.strip_prefix(p.as_str()).is_some_and(|r| r.starts_with('.')))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub tritanh: f64,
    pub ssl: f64,
    pub koleo: f64,
    pub d_pull: f64,
    pub d_push: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    #[serde(skip)]
    pub skipped: usize,
}

impl EpochStats {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.tritanh,
            self.ssl,
            self.koleo,
            self.d_pull,
            self.d_push,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Indices of one training triple into a [`PairedDataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Triple {
    /// Index into `normals`; always an original.
    pub anchor: usize,
    /// Index into `normals`, distinct from `anchor`.
    pub positive: usize,
    /// Index into `anomalous`.
    pub negative: usize,
}

impl Triple {
    pub fn anchor<'a>(&self, ds: &'a PairedDataset) -> &'a GrayImage {
        &ds.normals[self.anchor].image
    }

    pub fn positive<'a>(&self, ds: &'a PairedDataset) -> &'a GrayImage {
        &ds.normals[self.positive].image
    }

    pub fn negative<'a>(&self, ds: &'a PairedDataset) -> (&'a GrayImage, &'a DefectMask) {
        let e = &ds.anomalous[self.negative];
        (&e.image, &e.mask)
    }
}

/// Draws an anchor from the originals, a positive from the other normals and
/// a negative from the anomalous set, each uniformly.
pub fn sample_triple(ds: &PairedDataset, rng: &mut impl Rng) -> Result<Triple> {
    let originals = ds.original_count();
    if ds.normals.len() < 2 || originals == 0 {
        return Err(ConsultError::Config("triples need at least two normal images".into()));
    }
    if ds.anomalous.is_empty() {
        return Err(ConsultError::Config("triples need at least one anomalous image".into()));
    }
    let anchor = ds
        .originals()
        .nth(rng.random_range(0..originals))
        .map(|(i, _)| i)
        .expect("index below original count");
    let mut positive = rng.random_range(0..ds.normals.len() - 1);
    if positive >= anchor {
        positive += 1;
    }
    let negative = rng.random_range(0..ds.anomalous.len());
    Ok(Triple {
        anchor,
        positive,
        negative,
    })
}

/// Max-pool downsampling of a pixel mask onto an `gh x gw` grid. Pixel rows
/// `[i*H/gh, (i+1)*H/gh)` map to grid row `i`, so every pixel lands in one cell.
pub fn mask_to_grid(mask: &DefectMask, gh: usize, gw: usize) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![false; gh * gw];
    for y in 0..h {
        let i = (y * gh / h).min(gh - 1);
        for x in 0..w {
            if mask.get(y, x) {
                out[i * gw + (x * gw / w).min(gw - 1)] = true;
            }
        }
    }
    out
}

/// Provenance audit of every pull-side sample used in training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PullAudit {
    pub pull_samples: usize,
    pub originals: usize,
    pub augmented: usize,
    pub violations: usize,
}

impl PullAudit {
    fn record(&mut self, p: Provenance) {
        self.pull_samples += 1;
        match p {
            Provenance::Original => self.originals += 1,
            Provenance::Aug => self.augmented += 1,
            Provenance::Defect => self.violations += 1,
        }
    }
}

pub struct TrainOutcome {
    pub weights: WeightSet,
    pub stats: Vec<EpochStats>,
    pub audit: PullAudit,
    pub skipped: usize,
}

/// Where a training run writes its stats CSV, checkpoints and diagnostics.
#[derive(Clone, Debug)]
pub struct TrainSink {
    pub dir: PathBuf,
}

impl TrainSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn stats_path(&self) -> PathBuf {
        self.dir.join("epoch_stats.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:03}.cwt"))
    }
}

pub fn write_stats_csv(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

struct StepResult {
    loss: LossBreakdown,
    grads: WeightSet,
}

fn triple_step(
    net: &Network<'_>,
    cfg_e: &ExtractorConfig,
    objective: &Objective,
    ds: &PairedDataset,
    t: &Triple,
) -> Result<StepResult> {
    let k = cfg_e.patch_neighborhood;
    let (neg_img, neg_mask) = t.negative(ds);
    let passes = [
        net.forward(t.anchor(ds), true),
        net.forward(t.positive(ds), true),
        net.forward(neg_img, true),
    ];
    let mut grids = Vec::with_capacity(3);
    let mut shapes = Vec::with_capacity(3);
    for (p, img) in passes.iter().zip([t.anchor(ds), t.positive(ds), neg_img]) {
        let (g, s) = aggregate_with_shape(&p.stage_maps, k, img.height())?;
        grids.push(g);
        shapes.push(s);
    }
    let mask = mask_to_grid(neg_mask, grids[0].height, grids[0].width);
    let (loss, g) = objective.evaluate(&grids[0], &grids[1], &grids[2], &mask)?;
    let mut total = net.backward(&passes[0], &aggregate_backward(&g.anchor, &shapes[0]))?;
    total.add_scaled(&net.backward(&passes[1], &aggregate_backward(&g.positive, &shapes[1]))?, 1.0);
    total.add_scaled(&net.backward(&passes[2], &aggregate_backward(&g.negative, &shapes[2]))?, 1.0);
    Ok(StepResult { loss, grads: total })
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    epoch: usize,
    iteration: usize,
    triples: &'a [Triple],
    losses: Vec<Option<LossBreakdown>>,
    anchor_sources: Vec<usize>,
    negative_seeds: Vec<u64>,
}

/// Fine-tunes `init` on triples drawn from `ds`. With `resynthesize` set, the
/// pseudo-normal and anomalous sets are redrawn from `ds.few` for every epoch
/// after the first.
pub fn train_stage1(
    ds: &PairedDataset,
    cfg_e: &ExtractorConfig,
    cfg_t: &TrainConfig,
    init: &WeightSet,
    sink: Option<&TrainSink>,
) -> Result<TrainOutcome> {
    cfg_t.validate()?;
    let arch = Architecture::new(cfg_e)?;
    arch.validate_weights(init)?;
    let mut weights = init.clone();
    let mut adam = Adam::new(&weights, cfg_t.learning_rate, cfg_t.betas);
    let trainable = |name: &str| is_trainable(name) && !cfg_t.is_frozen(name);
    let mut stats = Vec::with_capacity(cfg_t.epochs);
    let mut audit = PullAudit::default();
    let mut skipped_total = 0;
    let mut epoch_ds: Option<PairedDataset> = None;

    for epoch in 1..=cfg_t.epochs {
        let started = Instant::now();
        if cfg_t.resynthesize && epoch > 1 {
            let seed = derive_seed(cfg_t.seed, TAG_EPOCH, epoch as u64);
            epoch_ds = Some(build_pair_dataset_with(
                &ds.few,
                cfg_t.n_normal_aug,
                cfg_t.n_anomalous,
                &cfg_t.defect,
                &cfg_t.augment,
                seed,
            )?);
        }
        let data = epoch_ds.as_ref().unwrap_or(ds);
        let mut sums = EpochStats::default();
        let (mut counted, mut skipped, mut grad_norm_sum) = (0usize, 0usize, 0.0);
        for it in 0..cfg_t.iters_per_epoch {
            let step_index = ((epoch - 1) * cfg_t.iters_per_epoch + it) as u64;
            let mut rng = child_rng(cfg_t.seed, TAG_TRAIN, step_index);
            let triples = (0..cfg_t.batch_size)
                .map(|_| sample_triple(data, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            for t in &triples {
                audit.record(data.normals[t.anchor].provenance);
                audit.record(data.normals[t.positive].provenance);
            }
            if audit.violations > 0 {
                return Err(ConsultError::AuditViolation(format!(
                    "anomalous image on the pull side at epoch {epoch}"
                )));
            }
            let net = Network {
                arch: &arch,
                ws: &weights,
            };
            let results = crate::par::par_map!(triples, |t| triple_step(&net, cfg_e, &cfg_t.objective, data, t));
            let mut grads = weights.zeros_like();
            let mut used = 0usize;
            let mut losses = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok(s) => {
                        losses.push(Some(s.loss));
                        if !s.loss.total.is_finite() || !s.grads.all_finite() {
                            continue;
                        }
                        grads.add_scaled(&s.grads, 1.0);
                        used += 1;
                        for (acc, v) in [
                            (&mut sums.total, s.loss.total),
                            (&mut sums.tritanh, s.loss.contrastive),
                            (&mut sums.ssl, s.loss.ssl),
                            (&mut sums.koleo, s.loss.koleo),
                            (&mut sums.d_pull, s.loss.d_pull),
                            (&mut sums.d_push, s.loss.d_push),
                        ] {
                            *acc += v;
                        }
                    }
                    Err(ConsultError::DefectVanished) => {
                        losses.push(None);
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            let nonfinite = losses.iter().flatten().any(|l| !l.total.is_finite())
                || losses.iter().flatten().count() != used;
            if nonfinite {
                let diag = Diagnostic {
                    epoch,
                    iteration: it,
                    triples: &triples,
                    anchor_sources: triples.iter().map(|t| data.normals[t.anchor].source).collect(),
                    negative_seeds: triples.iter().map(|t| data.anomalous[t.negative].seed).collect(),
                    losses,
                };
                let text = serde_json::to_string_pretty(&diag)?;
                if let Some(s) = sink {
                    fs::write(s.dir.join("nan_diagnostic.json"), &text)?;
                }
                return Err(ConsultError::Numerical(format!("non-finite loss or gradient: {text}")));
            }
            if used == 0 {
                continue;
            }
            grads.scale(1.0 / used as f64);
            for (name, t) in grads.iter_mut() {
                if !trainable(name) {
                    t.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            grad_norm_sum += grads.l2_norm();
            counted += used;
            adam.step(&mut weights, &grads, trainable);
        }
        skipped_total += skipped;
        let n = counted.max(1) as f64;
        let steps = cfg_t.iters_per_epoch as f64;
        let st = EpochStats {
            epoch,
            total: sums.total / n,
            tritanh: sums.tritanh / n,
            ssl: sums.ssl / n,
            koleo: sums.koleo / n,
            d_pull: sums.d_pull / n,
            d_push: sums.d_push / n,
            grad_norm: grad_norm_sum / steps,
            seconds: started.elapsed().as_secs_f64(),
            skipped,
        };
        log::info!(
            "epoch {epoch}: total {:.5} contrastive {:.5} d_pull {:.5} d_push {:.5} ({skipped} skipped)",
            st.total,
            st.tritanh,
            st.d_pull,
            st.d_push
        );
        stats.push(st);
        if let Some(s) = sink {
            write_stats_csv(&s.stats_path(), &stats)?;
            if cfg_t.checkpoint_every > 0 && epoch % cfg_t.checkpoint_every == 0 {
                weights.save(s.checkpoint_path(epoch))?;
            }
        }
    }
    if let Some(s) = sink {
        if stats.is_empty() {
            write_stats_csv(&s.stats_path(), &stats)?;
        }
    }
    weights.metadata.insert("stage1_epochs".into(), cfg_t.epochs.to_string());
    Ok(TrainOutcome {
        weights,
        stats,
        audit,
        skipped: skipped_total,
    })
}
