//! Coreset memory bank, nearest-neighbour scoring and thresholding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConsultError, Result};
use crate::extractor::{Extractor, ExtractorConfig, PatchFeatureGrid};
use crate::image::GrayImage;
use crate::nn::WeightSet;
use crate::raster::{gaussian_blur, resize_bilinear};
use crate::seed::{child_rng, TAG_BANK};

const MAGIC: &[u8; 4] = b"CSLT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub sampling_ratio: f64,
    pub k_neighbors: usize,
    /// Healthy-score quantile used as the decision threshold.
    pub tau_quantile: f64,
    /// Gaussian smoothing of the upsampled map, in pixels.
    pub blur_sigma: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            sampling_ratio: 0.10,
            k_neighbors: 9,
            tau_quantile: 0.99,
            blur_sigma: 4.0,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(ConsultError::Config(format!(
                "sampling_ratio must lie in (0, 1], got {}",
                self.sampling_ratio
            )));
        }
        if self.k_neighbors < 2 {
            return Err(ConsultError::Config(
                "k_neighbors must be at least 2; k = 1 zeroes every reweighted score".into(),
            ));
        }
        if !(self.tau_quantile > 0.0 && self.tau_quantile <= 1.0) {
            return Err(ConsultError::Config("tau_quantile must lie in (0, 1]".into()));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(ConsultError::Config("blur_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The image and grid cell a bank vector was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceIndex {
    pub image: usize,
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    /// Row-major `len() x dim`.
    pub vectors: Vec<f32>,
    pub sources: Vec<SourceIndex>,
    pub k_neighbors: usize,
    pub sampling_ratio: f64,
    pub fingerprint: [u8; 32],
}

/// Hash binding a bank to the weights and extractor configuration it was built with.
pub fn extractor_fingerprint(ws: &WeightSet, cfg: &ExtractorConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(ws.digest());
    h.update(serde_json::to_vec(cfg).expect("config serialises"));
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - y as f64) * (x - y as f64)).sum()
}

/// Greedy farthest-point selection of `n_select` rows of `points`, starting
/// at `start`. Ties go to the lowest index.
pub fn greedy_coreset(points: &[f64], dim: usize, n_select: usize, start: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let n_select = n_select.min(n);
    if n_select == 0 {
        return Vec::new();
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut selected = vec![start];
    let mut min_d = crate::par::par_range_map!(0..n, |i| sq_dist(row(i), row(start)));
    // Selected rows are never picked again, even among exact duplicates.
    min_d[start] = f64::NEG_INFINITY;
    while selected.len() < n_select {
        let mut best = 0;
        for i in 1..n {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        selected.push(best);
        min_d[best] = f64::NEG_INFINITY;
        let fresh = crate::par::par_range_map!(0..n, |i| sq_dist(row(i), row(best)));
        min_d.iter_mut().zip(fresh).for_each(|(m, f)| *m = m.min(f));
    }
    selected
}

/// Largest Euclidean distance from any point to its nearest selected point.
pub fn covering_radius(points: &[f64], dim: usize, selected: &[usize]) -> f64 {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    (0..n)
        .map(|i| {
            selected
                .iter()
                .map(|&s| sq_dist(row(i), row(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Coreset of all cells of `grids`, which must come from the original few shots.
    pub fn from_grids(grids: &[PatchFeatureGrid], fingerprint: [u8; 32], cfg: &BankConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let first = grids
            .first()
            .ok_or_else(|| ConsultError::InvalidArgument("bank needs at least one image".into()))?;
        let dim = first.dim;
        if grids.iter().any(|g| g.dim != dim) {
            return Err(ConsultError::InvalidArgument("feature dimensions differ across images".into()));
        }
        let mut points = Vec::new();
        let mut origin = Vec::new();
        for (image, g) in grids.iter().enumerate() {
            points.extend_from_slice(&g.data);
            origin.extend((0..g.cells()).map(|cell| SourceIndex { image, cell }));
        }
        let total = origin.len();
        let wanted = cfg.sampling_ratio * total as f64;
        if wanted < 1.0 {
            return Err(ConsultError::Config(format!(
                "sampling ratio {} of {total} patches selects nothing",
                cfg.sampling_ratio
            )));
        }
        let n_select = (wanted.ceil() as usize).min(total);
        let start = child_rng(seed, TAG_BANK, 0).random_range(0..total);
        let picked = greedy_coreset(&points, dim, n_select, start);
        let mut vectors = Vec::with_capacity(picked.len() * dim);
        for &i in &picked {
            vectors.extend(points[i * dim..(i + 1) * dim].iter().map(|&v| v as f32));
        }
        Ok(Self {
            dim,
            vectors,
            sources: picked.iter().map(|&i| origin[i]).collect(),
            k_neighbors: cfg.k_neighbors,
            sampling_ratio: cfg.sampling_ratio,
            fingerprint,
        })
    }

    /// Index and squared distance of the nearest bank vector.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d = sq_dist32(v, self.vector(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Indices of the `k` bank vectors nearest to bank vector `m`, `m` first.
    fn neighbours_of(&self, m: usize, k: usize) -> Vec<usize> {
        let anchor: Vec<f64> = self.vector(m).iter().map(|&v| v as f64).collect();
        let mut others: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| i != m)
            .map(|i| (sq_dist32(&anchor, self.vector(i)), i))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        std::iter::once(m)
            .chain(others.into_iter().map(|(_, i)| i))
            .take(k.max(1))
            .collect()
    }

    /// Reweighting factor `1 - e^{s*} / sum_{m in N_k(m*)} e^{d(x*, m)}`.
    pub fn reweight_factor(&self, query: &[f64], nearest: usize, raw: f64) -> f64 {
        let neigh = self.neighbours_of(nearest, self.k_neighbors.min(self.len()));
        let d: Vec<f64> = neigh.iter().map(|&i| sq_dist32(query, self.vector(i))).collect();
        let top = d.iter().copied().fold(raw, f64::max);
        let denom: f64 = d.iter().map(|v| (v - top).exp()).sum();
        (1.0 - (raw - top).exp() / denom).clamp(0.0, 1.0)
    }

    /// Per-cell nearest-neighbour scores of a grid and the reweighted image score.
    pub fn score_grid(&self, grid: &PatchFeatureGrid, input_size: (usize, usize), blur_sigma: f64) -> Result<AnomalyMap> {
        if grid.dim != self.dim {
            return Err(ConsultError::InvalidArgument(format!(
                "grid dimension {} does not match bank dimension {}",
                grid.dim, self.dim
            )));
        }
        let hits = crate::par::par_range_map!(0..grid.cells(), |c| self.nearest(grid.cell(c)));
        let scores: Vec<f64> = hits.iter().map(|h| h.1).collect();
        let mut star = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[star] {
                star = i;
            }
        }
        let raw = scores[star];
        let factor = self.reweight_factor(grid.cell(star), hits[star].0, raw);
        let (h, w) = input_size;
        let mut upsampled = resize_bilinear(&scores, grid.height, grid.width, h, w);
        if blur_sigma > 0.0 {
            upsampled = gaussian_blur(&upsampled, h, w, blur_sigma);
        }
        let map = AnomalyMap {
            grid_height: grid.height,
            grid_width: grid.width,
            scores,
            image_score: factor * raw,
            raw_score: raw,
            max_cell: star,
            height: h,
            width: w,
            upsampled,
        };
        if !map.is_finite() {
            return Err(ConsultError::Numerical("non-finite anomaly scores".into()));
        }
        Ok(map)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.k_neighbors as u32).to_le_bytes())?;
        out.write_all(&self.sampling_ratio.to_le_bytes())?;
        out.write_all(&self.fingerprint)?;
        for v in &self.vectors {
            out.write_all(&v.to_le_bytes())?;
        }
        serde_json::to_writer(&mut out, &self.sources)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let data_err = |what: &str| ConsultError::Data(format!("bank file: {what}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| data_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(data_err("bad magic"));
        }
        let mut u32_field = || -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| data_err("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_field()?;
        if version != VERSION {
            return Err(data_err(&format!("unsupported version {version}")));
        }
        let dim = u32_field()? as usize;
        let count = u32_field()? as usize;
        let k = u32_field()? as usize;
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8).map_err(|_| data_err("truncated header"))?;
        let ratio = f64::from_le_bytes(b8);
        let mut fingerprint = [0u8; 32];
        input.read_exact(&mut fingerprint).map_err(|_| data_err("truncated header"))?;
        let mut raw = vec![0u8; count * dim * 4];
        input.read_exact(&mut raw).map_err(|_| data_err("truncated vectors"))?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut trailer = Vec::new();
        input.read_to_end(&mut trailer)?;
        let sources: Vec<SourceIndex> =
            serde_json::from_slice(&trailer).map_err(|e| data_err(&format!("bad source trailer: {e}")))?;
        if sources.len() != count {
            return Err(data_err("source count differs from vector count"));
        }
        Ok(Self {
            dim,
            vectors,
            sources,
            k_neighbors: k,
            sampling_ratio: ratio,
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Extracts every patch of the few shots and keeps a greedy coreset.
pub fn build_bank(
    few: &[GrayImage],
    ws: &WeightSet,
    cfg_e: &ExtractorConfig,
    cfg: &BankConfig,
    seed: u64,
) -> Result<MemoryBank> {
    let grids = Extractor::new(cfg_e, ws)?.grids(few)?;
    MemoryBank::from_grids(&grids, extractor_fingerprint(ws, cfg_e), cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Squared distance of each cell to its nearest bank vector.
    pub scores: Vec<f64>,
    /// Reweighted score of the maximal cell.
    pub image_score: f64,
    /// Maximum of `scores`.
    pub raw_score: f64,
    pub max_cell: usize,
    pub height: usize,
    pub width: usize,
    pub upsampled: Vec<f64>,
}

impl AnomalyMap {
    pub fn is_finite(&self) -> bool {
        self.image_score.is_finite()
            && self.scores.iter().all(|v| v.is_finite())
            && self.upsampled.iter().all(|v| v.is_finite())
    }
}

/// Scores one image; refuses when the bank was built with other weights or configuration.
pub fn score_image(
    img: &GrayImage,
    bank: &MemoryBank,
    ws: &WeightSet,
    cfg_e: &ExtractorConfig,
    cfg: &BankConfig,
) -> Result<AnomalyMap> {
    if extractor_fingerprint(ws, cfg_e) != bank.fingerprint {
        return Err(ConsultError::FingerprintMismatch);
    }
    let grid = Extractor::new(cfg_e, ws)?.grid(img)?;
    bank.score_grid(&grid, (img.height(), img.width()), cfg.blur_sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub tau: f64,
    pub is_anomaly: bool,
}

pub fn decide(map: &AnomalyMap, tau: f64) -> Decision {
    Decision {
        tau,
        is_anomaly: map.image_score > tau,
    }
}

/// Linearly interpolated `q`-quantile of healthy scores.
pub fn calibrate_tau(healthy_scores: &[f64], q: f64) -> Result<f64> {
    if healthy_scores.is_empty() {
        return Err(ConsultError::InvalidArgument("no healthy scores to calibrate on".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(ConsultError::InvalidArgument(format!("quantile must lie in (0, 1], got {q}")));
    }
    let mut s = healthy_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Writes the query blended with a jet-coloured score map. Scores are scaled
/// by `vmax` (the map maximum when `None`).
pub fn save_overlay(img: &GrayImage, map: &AnomalyMap, vmax: Option<f64>, path: impl AsRef<Path>) -> Result<()> {
    if (img.height(), img.width()) != (map.height, map.width) {
        return Err(ConsultError::InvalidArgument("overlay needs the scored image".into()));
    }
    let top = vmax.unwrap_or_else(|| map.upsampled.iter().copied().fold(0.0, f64::max));
    let mut out = ::image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = img.pixels()[i] as f64;
        let c = jet(if top > 0.0 { map.upsampled[i] / top } else { 0.0 });
        for k in 0..3 {
            px.0[k] = (0.5 * g + 0.5 * c[k] as f64).round().clamp(0.0, 255.0) as u8;
        }
    }
    out.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_optimal_radius(points: &[f64], dim: usize, k: usize) -> f64 {
        let n = points.len() / dim;
        let mut best = f64::INFINITY;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            best = best.min(covering_radius(points, dim, &idx));
            // Next k-combination in lexicographic order.
            let mut i = k;
            while i > 0 && idx[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                return best;
            }
            idx[i - 1] += 1;
            for j in i..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    fn bank_1d(values: &[f32], k: usize) -> MemoryBank {
        MemoryBank {
            dim: 1,
            vectors: values.to_vec(),
            sources: (0..values.len()).map(|i| SourceIndex { image: 0, cell: i }).collect(),
            k_neighbors: k,
            sampling_ratio: 1.0,
            fingerprint: [0; 32],
        }
    }

    fn grid_1d(values: &[f64]) -> PatchFeatureGrid {
        PatchFeatureGrid::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn one_dimensional_pick_two() {
        let pts = [0.0, 1.0, 10.0];
        assert_eq!(greedy_coreset(&pts, 1, 2, 0), vec![0, 2]);
        let opt = brute_optimal_radius(&pts, 1, 2);
        assert_eq!(covering_radius(&pts, 1, &[0, 2]), opt);
    }

    #[test]
    fn greedy_is_within_twice_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let n = rng.random_range(5..=20);
            let dim = rng.random_range(1..4);
            let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            for k in 1..=4 {
                let opt = brute_optimal_radius(&pts, dim, k);
                for start in 0..n {
                    let r = covering_radius(&pts, dim, &greedy_coreset(&pts, dim, k, start));
                    assert!(r <= 2.0 * opt + 1e-12, "n {n} k {k}: {r} vs {opt}");
                }
            }
        }
    }

    #[test]
    fn large_instance_against_subsample_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<f64> = (0..500 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sel = greedy_coreset(&pts, 16, 50, 0);
        assert_eq!(sel.len(), 50);
        let mut uniq = sel.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 50);
        let sub = &pts[..20 * 16];
        let opt = brute_optimal_radius(sub, 16, 4);
        assert!(covering_radius(sub, 16, &greedy_coreset(sub, 16, 4, 0)) <= 2.0 * opt);
    }

    #[test]
    fn duplicates_are_not_selected_twice() {
        let pts = [1.0, 1.0, 1.0, 2.0];
        assert_eq!(greedy_coreset(&pts, 1, 4, 1), vec![1, 3, 0, 2]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let g = grid_1d(&[3.0, 1.0, 4.0, 1.5, 9.0]);
        let cfg = BankConfig {
            sampling_ratio: 1.0,
            ..BankConfig::default()
        };
        let bank = MemoryBank::from_grids(std::slice::from_ref(&g), [0; 32], &cfg, 4).unwrap();
        let mut cells: Vec<usize> = bank.sources.iter().map(|s| s.cell).collect();
        cells.sort_unstable();
        assert_eq!(cells, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_bank_configs() {
        let g = grid_1d(&[0.0, 1.0, 2.0]);
        let tiny = BankConfig {
            sampling_ratio: 0.1,
            ..BankConfig::default()
        };
        assert!(matches!(
            MemoryBank::from_grids(std::slice::from_ref(&g), [0; 32], &tiny, 0),
            Err(ConsultError::Config(_))
        ));
        let k1 = BankConfig {
            k_neighbors: 1,
            ..BankConfig::default()
        };
        assert!(matches!(k1.validate(), Err(ConsultError::Config(_))));
        assert!(BankConfig {
            sampling_ratio: 0.0,
            ..BankConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn raw_score_examples() {
        let bank = bank_1d(&[0.0, 1.0], 2);
        let m = bank.score_grid(&grid_1d(&[0.4, 1.0]), (32, 32), 4.0).unwrap();
        assert!((m.scores[0] - 0.16).abs() < 1e-12);
        assert_eq!(m.scores[1], 0.0);
        assert_eq!(m.raw_score, m.scores[0]);
        assert!(m.image_score <= m.raw_score && m.image_score >= 0.0);
        let degenerate = bank_1d(&[0.0, 1.0], 1);
        let m = degenerate.score_grid(&grid_1d(&[0.4]), (32, 32), 0.0).unwrap();
        assert_eq!(m.image_score, 0.0);
    }

    #[test]
    fn reweighting_matches_direct_formula() {
        let bank = bank_1d(&[0.0, 0.5, 2.0, 3.0], 3);
        let q = [1.1];
        let (m, s) = bank.nearest(&q);
        assert_eq!(m, 1);
        // Neighbours of 0.5 among the bank: itself, 0.0, 2.0.
        let direct = 1.0 - s.exp() / [0.5f64, 0.0, 2.0].iter().map(|v| (q[0] - v).powi(2).exp()).sum::<f64>();
        assert!((bank.reweight_factor(&q, m, s) - direct).abs() < 1e-12);
    }

    #[test]
    fn decisions_and_thresholds() {
        let mut m = bank_1d(&[0.0, 1.0], 2).score_grid(&grid_1d(&[0.0]), (32, 32), 0.0).unwrap();
        assert!(!decide(&m, 0.0).is_anomaly);
        m.image_score = 5.0;
        assert!(decide(&m, 1.0).is_anomaly);
        assert!(!decide(&m, f64::INFINITY).is_anomaly);
        assert_eq!(calibrate_tau(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 4.0);
        assert_eq!(calibrate_tau(&[2.5; 7], 0.3).unwrap(), 2.5);
        let hundred: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((calibrate_tau(&hundred, 0.95).unwrap() - 94.05).abs() < 1e-9);
        assert!(calibrate_tau(&[], 0.5).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grids: Vec<_> = (0..2)
            .map(|_| PatchFeatureGrid::new(4, 4, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let bank = MemoryBank::from_grids(&grids, [7; 32], &BankConfig::default(), 1).unwrap();
        assert_eq!(bank.len(), 4);
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSLT");
        assert_eq!(MemoryBank::read_from(&buf[..]).unwrap(), bank);
        assert!(matches!(MemoryBank::read_from(&buf[..60]), Err(ConsultError::Data(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MemoryBank::read_from(&bad[..]).is_err());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    proptest! {
        #[test]
        fn adding_vectors_never_raises_scores(
            bank in prop::collection::vec(-5.0f32..5.0, 2..12),
            extra in -5.0f32..5.0,
            queries in prop::collection::vec(-6.0f64..6.0, 1..10),
        ) {
            let small = bank_1d(&bank, 3);
            let mut grown = bank.clone();
            grown.push(extra);
            let big = bank_1d(&grown, 3);
            let g = grid_1d(&queries);
            let a = small.score_grid(&g, (32, 32), 0.0).unwrap();
            let b = big.score_grid(&g, (32, 32), 0.0).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!(y <= x);
            }
        }

        #[test]
        fn reweight_factor_in_unit_interval(
            bank in prop::collection::vec(-2.0f32..2.0, 2..12),
            q in -3.0f64..3.0,
            k in 2usize..12,
        ) {
            let b = bank_1d(&bank, k);
            let (m, s) = b.nearest(&[q]);
            let f = b.reweight_factor(&[q], m, s);
            prop_assert!((0.0..1.0).contains(&f));
            let map = b.score_grid(&grid_1d(&[q]), (32, 32), 0.0).unwrap();
            prop_assert!(map.image_score <= map.raw_score);
        }
    }
}
