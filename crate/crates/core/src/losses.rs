//! Contrastive, self-similarity and norm-spreading objectives with analytic gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ConsultError, Result};
use crate::extractor::PatchFeatureGrid;

/// Exponent arguments beyond this are clamped.
pub const EXP_CLAMP: f64 = 80.0;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of exponent clamps since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// `e^arg` with the argument clamped; the flag reports whether the clamp fired.
fn clamped_exp(arg: f64) -> (f64, bool) {
    if arg > EXP_CLAMP {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        log::debug!("exponent argument {arg} clamped to {EXP_CLAMP}");
        (EXP_CLAMP.exp(), true)
    } else {
        (arg.exp(), false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TritanhParams {
    pub lambda0: f64,
    pub lambda1: f64,
    pub m0: f64,
    pub m1: f64,
}

impl Default for TritanhParams {
    fn default() -> Self {
        Self {
            lambda0: 2.0,
            lambda1: 1.0,
            m0: 1.0,
            m1: 1.0,
        }
    }
}

impl TritanhParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda0 > 0.0 && self.lambda1 > 0.0 && self.m0 >= 0.0 && self.m1 >= 0.0;
        if !ok || self.m0 > self.m1 + 2.0 {
            return Err(ConsultError::Config(format!(
                "tritanh parameters need positive lambdas and 0 <= m0 <= m1 + 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub m: f64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha1: 1.0,
            m: 1.0,
        }
    }
}

impl AnchorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha1 > 0.0 && self.m.is_finite()) {
            return Err(ConsultError::Config(format!("anchor weights must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfaParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub eps: f64,
}

impl Default for SfaParams {
    fn default() -> Self {
        Self {
            gamma1: 0.01,
            gamma2: 0.01,
            eps: 1e-8,
        }
    }
}

impl SfaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.eps > 0.0) {
            return Err(ConsultError::Config(format!(
                "sfa weights must be nonnegative and eps positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveDistances {
    pub d_pull: f64,
    pub d_push: f64,
    pub n_pull: usize,
    pub n_push: usize,
}

impl ContrastiveDistances {
    /// Distances without cell counts, for evaluating losses directly.
    pub fn new(d_pull: f64, d_push: f64) -> Self {
        Self {
            d_pull,
            d_push,
            n_pull: 1,
            n_push: 1,
        }
    }
}

fn check_grids(anchor: &PatchFeatureGrid, others: &[&PatchFeatureGrid], mask: &[bool]) -> Result<()> {
    if others.iter().any(|g| !g.same_shape(anchor)) {
        return Err(ConsultError::InvalidArgument("feature grids differ in shape".into()));
    }
    if mask.len() != anchor.cells() {
        return Err(ConsultError::InvalidArgument(format!(
            "mask has {} cells, grid has {}",
            mask.len(),
            anchor.cells()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean per-dimension squared distances: positive vs anchor over every cell,
/// negative vs anchor over the masked cells.
pub fn masked_distances(
    anchor: &PatchFeatureGrid,
    positive: &PatchFeatureGrid,
    negative: &PatchFeatureGrid,
    neg_mask: &[bool],
) -> Result<ContrastiveDistances> {
    check_grids(anchor, &[positive, negative], neg_mask)?;
    let n_push = neg_mask.iter().filter(|&&m| m).count();
    if n_push == 0 {
        return Err(ConsultError::DefectVanished);
    }
    let d = anchor.dim as f64;
    let n = anchor.cells();
    let pull: f64 = (0..n).map(|i| sq_dist(positive.cell(i), anchor.cell(i))).sum();
    let push: f64 = (0..n)
        .filter(|&i| neg_mask[i])
        .map(|i| sq_dist(negative.cell(i), anchor.cell(i)))
        .sum();
    Ok(ContrastiveDistances {
        d_pull: pull / (n as f64 * d),
        d_push: push / (n_push as f64 * d),
        n_pull: n,
        n_push,
    })
}

/// Gradients of `g_pull * d_pull + g_push * d_push` with respect to the
/// anchor, positive and negative grid data.
pub fn masked_distances_backward(
    anchor: &PatchFeatureGrid,
    positive: &PatchFeatureGrid,
    negative: &PatchFeatureGrid,
    neg_mask: &[bool],
    dist: &ContrastiveDistances,
    g_pull: f64,
    g_push: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dim = anchor.dim;
    let cp = 2.0 * g_pull / (dist.n_pull as f64 * dim as f64);
    let cn = 2.0 * g_push / (dist.n_push as f64 * dim as f64);
    let mut ga = vec![0.0; anchor.data.len()];
    let mut gp = vec![0.0; anchor.data.len()];
    let mut gn = vec![0.0; anchor.data.len()];
    for i in 0..anchor.cells() {
        for k in i * dim..(i + 1) * dim {
            let dp = positive.data[k] - anchor.data[k];
            gp[k] = cp * dp;
            ga[k] = -cp * dp;
            if neg_mask[i] {
                let dn = negative.data[k] - anchor.data[k];
                gn[k] = cn * dn;
                ga[k] -= cn * dn;
            }
        }
    }
    (ga, gp, gn)
}

pub fn anchor_loss(d: &ContrastiveDistances, p: &AnchorParams) -> f64 {
    (p.alpha0 * d.d_pull - p.alpha1 * d.d_push + p.m).max(0.0)
}

/// Partial derivatives `(dL/dd_pull, dL/dd_push)`, zero where the hinge is clamped.
pub fn anchor_grad(d: &ContrastiveDistances, p: &AnchorParams) -> (f64, f64) {
    if p.alpha0 * d.d_pull - p.alpha1 * d.d_push + p.m > 0.0 {
        (p.alpha0, -p.alpha1)
    } else {
        (0.0, 0.0)
    }
}

pub fn tritanh_loss(d: &ContrastiveDistances, p: &TritanhParams) -> f64 {
    let (a, _) = clamped_exp(p.lambda0 * d.d_pull);
    let (b, _) = clamped_exp(p.lambda1 * d.d_push);
    (a - b + p.m0) / (a + b + p.m1)
}

/// Partial derivatives `(dL/dd_pull, dL/dd_push)`.
pub fn tritanh_grad(d: &ContrastiveDistances, p: &TritanhParams) -> (f64, f64) {
    let (a, ca) = clamped_exp(p.lambda0 * d.d_pull);
    let (b, cb) = clamped_exp(p.lambda1 * d.d_push);
    let den = a + b + p.m1;
    let dl_da = (2.0 * b + p.m1 - p.m0) / (den * den);
    let dl_db = -(2.0 * a + p.m1 + p.m0) / (den * den);
    let da = if ca { 0.0 } else { p.lambda0 * a };
    let db = if cb { 0.0 } else { p.lambda1 * b };
    (dl_da * da, dl_db * db)
}

fn cell_mean(g: &PatchFeatureGrid) -> Vec<f64> {
    let mut mean = vec![0.0; g.dim];
    for v in g.vectors() {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    let n = g.cells() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Mean pairwise per-dimension squared distance between distinct cells,
/// evaluated exactly through `sum_{i!=j} |Pi-Pj|^2 = 2N sum_i |Pi-mean|^2`.
pub fn ssl_loss(anchor: &PatchFeatureGrid) -> Result<f64> {
    let n = anchor.cells();
    if n < 2 {
        return Err(ConsultError::InvalidArgument("self-similarity needs at least two cells".into()));
    }
    let mean = cell_mean(anchor);
    let spread: f64 = anchor.vectors().map(|v| sq_dist(v, &mean)).sum();
    Ok(2.0 * spread / ((n - 1) as f64 * anchor.dim as f64))
}

pub fn ssl_grad(anchor: &PatchFeatureGrid) -> Vec<f64> {
    let n = anchor.cells();
    let mean = cell_mean(anchor);
    let c = 4.0 / ((n - 1) as f64 * anchor.dim as f64);
    anchor
        .data
        .iter()
        .enumerate()
        .map(|(k, v)| c * (v - mean[k % anchor.dim]))
        .collect()
}

pub fn koleo_loss<'a>(features: impl IntoIterator<Item = &'a [f64]>, p: &SfaParams) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in features {
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        sum += (norm + p.eps).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        -sum / n as f64
    }
}

/// Gradient of [`koleo_loss`] over the cells of a grid.
pub fn koleo_grad(anchor: &PatchFeatureGrid, p: &SfaParams) -> Vec<f64> {
    let n = anchor.cells() as f64;
    let mut g = vec![0.0; anchor.data.len()];
    for (v, out) in anchor.vectors().zip(g.chunks_exact_mut(anchor.dim)) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let c = -1.0 / (n * norm * (norm + p.eps));
            out.iter_mut().zip(v).for_each(|(o, x)| *o = c * x);
        }
    }
    g
}

pub fn sfa_loss(anchor: &PatchFeatureGrid, p: &SfaParams) -> Result<f64> {
    let ssl = if p.gamma1 == 0.0 { 0.0 } else { ssl_loss(anchor)? };
    let koleo = if p.gamma2 == 0.0 { 0.0 } else { koleo_loss(anchor.vectors(), p) };
    Ok(p.gamma1 * ssl + p.gamma2 * koleo)
}

pub fn total_loss(
    d: &ContrastiveDistances,
    anchor: &PatchFeatureGrid,
    tp: &TritanhParams,
    sp: &SfaParams,
) -> Result<f64> {
    Ok(tritanh_loss(d, tp) + sfa_loss(anchor, sp)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    #[default]
    Tritanh,
    Anchor,
}

/// Full stage-1 objective, including the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub loss: ContrastiveKind,
    pub use_ssl: bool,
    pub use_koleo: bool,
    pub tritanh: TritanhParams,
    pub anchor: AnchorParams,
    pub sfa: SfaParams,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            loss: ContrastiveKind::Tritanh,
            use_ssl: true,
            use_koleo: true,
            tritanh: TritanhParams::default(),
            anchor: AnchorParams::default(),
            sfa: SfaParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub ssl: f64,
    pub koleo: f64,
    pub d_pull: f64,
    pub d_push: f64,
}

/// Grid gradients of the objective for one triple.
pub struct TripleGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.tritanh.validate()?;
        self.anchor.validate()?;
        self.sfa.validate()
    }

    fn gamma1(&self) -> f64 {
        if self.use_ssl {
            self.sfa.gamma1
        } else {
            0.0
        }
    }

    fn gamma2(&self) -> f64 {
        if self.use_koleo {
            self.sfa.gamma2
        } else {
            0.0
        }
    }

    pub fn contrastive(&self, d: &ContrastiveDistances) -> (f64, (f64, f64)) {
        match self.loss {
            ContrastiveKind::Tritanh => (tritanh_loss(d, &self.tritanh), tritanh_grad(d, &self.tritanh)),
            ContrastiveKind::Anchor => (anchor_loss(d, &self.anchor), anchor_grad(d, &self.anchor)),
        }
    }

    /// Loss value and its gradients for an (anchor, positive, negative) triple.
    pub fn evaluate(
        &self,
        anchor: &PatchFeatureGrid,
        positive: &PatchFeatureGrid,
        negative: &PatchFeatureGrid,
        neg_mask: &[bool],
    ) -> Result<(LossBreakdown, TripleGrads)> {
        let d = masked_distances(anchor, positive, negative, neg_mask)?;
        let (contrastive, (gp, gn)) = self.contrastive(&d);
        let (mut ga, gpos, gneg) = masked_distances_backward(anchor, positive, negative, neg_mask, &d, gp, gn);
        let (g1, g2) = (self.gamma1(), self.gamma2());
        let ssl = ssl_loss(anchor)?;
        let koleo = koleo_loss(anchor.vectors(), &self.sfa);
        if g1 != 0.0 {
            ga.iter_mut().zip(ssl_grad(anchor)).for_each(|(a, s)| *a += g1 * s);
        }
        if g2 != 0.0 {
            ga.iter_mut().zip(koleo_grad(anchor, &self.sfa)).for_each(|(a, k)| *a += g2 * k);
        }
        let breakdown = LossBreakdown {
            total: contrastive + g1 * ssl + g2 * koleo,
            contrastive,
            ssl,
            koleo,
            d_pull: d.d_pull,
            d_push: d.d_push,
        };
        Ok((
            breakdown,
            TripleGrads {
                anchor: ga,
                positive: gpos,
                negative: gneg,
            },
        ))
    }
}
