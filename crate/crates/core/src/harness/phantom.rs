//! Procedural brain-like phantoms for experiments without a real dataset.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{DefectMask, GrayImage};
use crate::raster::{gaussian_blur, resize_bilinear};
use crate::seed::{child_rng, derive_seed, rng_from, TAG_PHANTOM};
use crate::synthlab::morphology::erode;
use crate::synthlab::{generate_defect_in, locate_brain_default, DefectSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    /// Healthy images available for few-shot sampling.
    pub pool_size: usize,
    pub test_healthy: usize,
    pub test_anomalous: usize,
    /// Per-pixel acquisition noise.
    pub noise_std: f64,
    /// Tumour control points are drawn within this fraction of the brain diagonal.
    pub tumor_extent: f64,
    /// Tumour brightness above the local tissue mean, drawn uniformly.
    pub tumor_contrast: (f64, f64),
    /// Std of the smooth tumour texture.
    pub tumor_texture_std: f64,
    /// Gaussian softening of the tumour boundary in pixels.
    pub tumor_edge_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            pool_size: 24,
            test_healthy: 30,
            test_anomalous: 30,
            noise_std: 6.0,
            tumor_extent: 0.25,
            tumor_contrast: (40.0, 70.0),
            tumor_texture_std: 6.0,
            tumor_edge_sigma: 1.0,
        }
    }
}

/// One healthy phantom: skull ring, folded cortex texture, dark ventricles.
pub fn phantom_brain(size: usize, seed: u64) -> GrayImage {
    phantom_brain_with(size, seed, PhantomConfig::default().noise_std)
}

pub fn phantom_brain_with(size: usize, seed: u64, noise_std: f64) -> GrayImage {
    let mut rng = rng_from(seed);
    let s = size as f64;
    let cy = s / 2.0 + rng.random_range(-0.03..0.03) * s;
    let cx = s / 2.0 + rng.random_range(-0.03..0.03) * s;
    let ay = s * rng.random_range(0.36..0.42);
    let ax = s * rng.random_range(0.30..0.36);
    let rot: f64 = rng.random_range(-0.25..0.25);
    let (sin, cos) = rot.sin_cos();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = std::f64::consts::TAU / (s * rng.random_range(0.08..0.14));
            (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(6.0..12.0))
        })
        .collect();
    let vent_off = rng.random_range(0.08..0.14);
    let vent_size = rng.random_range(0.10..0.16);
    let base = rng.random_range(95.0..115.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let eps: Vec<f64> = (0..size * size).map(|_| noise.sample(&mut rng)).collect();
    GrayImage::from_fn_clamped(size, size, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let u = (cos * dy + sin * dx) / ay;
        let v = (-sin * dy + cos * dx) / ax;
        let r = (u * u + v * v).sqrt();
        let n = noise_std * eps[y * size + x];
        if r > 1.1 {
            return (n * 0.3).max(0.0);
        }
        if r > 1.0 {
            return 170.0 + n;
        }
        if r > 0.95 {
            return 20.0 + n;
        }
        let folds: f64 = waves.iter().map(|(ky, kx, ph, amp)| amp * (ky * dy + kx * dx + ph).sin()).sum();
        let cortex = 25.0 * ((r - 0.7) / 0.25).clamp(0.0, 1.0);
        let mut val = base + cortex + folds * (0.4 + 0.6 * r);
        for side in [-1.0, 1.0] {
            let vu = u / (vent_size * 1.8);
            let vv = (v - side * vent_off) / vent_size;
            if vu * vu + vv * vv < 1.0 {
                val = 35.0;
            }
        }
        val + n
    })
    .expect("phantom size is valid")
}

/// Implants a soft-edged bright lesion with smooth texture inside the brain
/// tissue (away from the skull). Returns the image and the lesion mask.
pub fn implant_tumor(img: &GrayImage, seed: u64, cfg: &PhantomConfig) -> Result<(GrayImage, DefectMask)> {
    let (h, w) = (img.height(), img.width());
    let head = locate_brain_default(img)?;
    let margin = (h.min(w) / 10).max(2);
    let inner = DefectMask::from_vec(w, h, erode(head.as_slice(), h, w, margin))?;
    let spec = DefectSpec {
        extent: Some(cfg.tumor_extent),
        edginess: 0.1,
        mu: Some(0.0),
        sigma: Some(1.0),
        ..DefectSpec::default().with_seed(seed)
    };
    let (_, mask) = generate_defect_in(img, &inner, &spec)?;
    let mut rng = child_rng(seed, TAG_PHANTOM, 1);
    let contrast = rng.random_range(cfg.tumor_contrast.0..=cfg.tumor_contrast.1);
    let px = img.to_f64();
    let inside: Vec<f64> = (0..h * w).filter(|&i| mask.as_slice()[i]).map(|i| px[i]).collect();
    let level = inside.iter().sum::<f64>() / inside.len() as f64 + contrast;
    let normal = Normal::new(0.0, cfg.tumor_texture_std).expect("positive std");
    let coarse: Vec<f64> = (0..6 * 6).map(|_| normal.sample(&mut rng)).collect();
    let texture = resize_bilinear(&coarse, 6, 6, h, w);
    let hard: Vec<f64> = mask.as_slice().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let alpha = if cfg.tumor_edge_sigma > 0.0 {
        gaussian_blur(&hard, h, w, cfg.tumor_edge_sigma)
    } else {
        hard
    };
    let grain = Normal::new(0.0, (cfg.noise_std * 0.5).max(1e-9)).expect("positive std");
    let grain: Vec<f64> = (0..h * w).map(|_| grain.sample(&mut rng)).collect();
    let out = GrayImage::from_fn_clamped(w, h, |y, x| {
        let i = y * w + x;
        let a = alpha[i];
        if a <= 1e-6 {
            return px[i];
        }
        let lesion = level + texture[i] + grain[i];
        px[i] * (1.0 - a) + lesion * a
    })?;
    Ok((out, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    Anomalous,
}

#[derive(Clone, Debug)]
pub struct TestItem {
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
    pub mask: Option<DefectMask>,
}

#[derive(Clone, Debug)]
pub struct SurrogateData {
    pub pool: Vec<GrayImage>,
    pub test: Vec<TestItem>,
}

// Disjoint seed streams for the pool, the test healthy images and the test lesions.
const POOL: u64 = 0;
const TEST_HEALTHY: u64 = 1 << 32;
const TEST_LESION: u64 = 2 << 32;

/// Healthy pool plus a test split of healthy and lesioned phantoms, all from
/// seed streams that training synthesis never touches.
pub fn generate_surrogate(cfg: &PhantomConfig, seed: u64) -> Result<SurrogateData> {
    let size = cfg.size;
    let brain = |stream: u64| phantom_brain_with(size, derive_seed(seed, TAG_PHANTOM, stream), cfg.noise_std);
    let pool = crate::par::par_range_map!(0..cfg.pool_size, |i| brain(POOL + i as u64));
    let healthy = crate::par::par_range_map!(0..cfg.test_healthy, |i| TestItem {
        id: format!("test_healthy_{i:04}"),
        image: brain(TEST_HEALTHY + i as u64),
        label: Label::Healthy,
        mask: None,
    });
    let anomalous = crate::par::par_range_map!(0..cfg.test_anomalous, |i| -> Result<TestItem> {
        let base = brain(TEST_HEALTHY + (1 << 20) + i as u64);
        let (image, mask) = implant_tumor(&base, derive_seed(seed, TAG_PHANTOM, TEST_LESION + i as u64), cfg)?;
        Ok(TestItem {
            id: format!("test_anomalous_{i:04}"),
            image,
            label: Label::Anomalous,
            mask: Some(mask),
        })
    });
    let mut test = healthy;
    for a in anomalous {
        test.push(a?);
    }
    Ok(SurrogateData { pool, test })
}
