//! Pseudo-tumour synthesis: a Bezier blob inside the brain, filled with
//! upsampled Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bezier::{bezier_hull, fill_polygon, Point, DEFAULT_SAMPLES_PER_SEGMENT};
use super::morphology::locate_brain_default;
use crate::error::{ConsultError, Result};
use crate::image::{DefectMask, GrayImage};
use crate::raster::resize_bilinear;
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefectSpec {
    /// Number of Bezier control points.
    pub n_control: usize,
    /// Outward bulge of each segment relative to its chord.
    pub edginess: f64,
    /// Noise mean override; drawn uniformly from the integers `0..255` when absent.
    pub mu: Option<f64>,
    /// Noise std override; drawn from `U(10, 20)` when absent.
    pub sigma: Option<f64>,
    /// Size of the noise grid before it is upsampled to the image.
    pub noise_base_shape: (usize, usize),
    pub rng_seed: u64,
    pub samples_per_segment: usize,
    /// Minimum control-point spacing as a fraction of the brain bounding-box diagonal.
    pub min_sep_fraction: f64,
    /// When set, control points are drawn within this fraction of the bounding-box
    /// diagonal around a random brain pixel instead of over the whole brain.
    pub extent: Option<f64>,
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self {
            n_control: 5,
            edginess: 0.05,
            mu: None,
            sigma: None,
            noise_base_shape: (15, 15),
            rng_seed: 0,
            samples_per_segment: DEFAULT_SAMPLES_PER_SEGMENT,
            min_sep_fraction: 0.05,
            extent: None,
        }
    }
}

impl DefectSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_control < 3 {
            return Err(ConsultError::InvalidArgument(format!(
                "n_control must be >= 3, got {}",
                self.n_control
            )));
        }
        if !(self.edginess >= 0.0) {
            return Err(ConsultError::InvalidArgument("edginess must be >= 0".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(ConsultError::InvalidArgument("sigma must be > 0".into()));
            }
        }
        if self.noise_base_shape.0 == 0 || self.noise_base_shape.1 == 0 {
            return Err(ConsultError::InvalidArgument("noise_base_shape must be nonzero".into()));
        }
        Ok(())
    }
}

const SEPARATION_ROUNDS: usize = 4;
const DRAWS_PER_ROUND: usize = 2000;
const SHAPE_ATTEMPTS: usize = 16;

fn sample_points<R: Rng>(
    rng: &mut R,
    brain_pixels: &[(usize, usize)],
    n: usize,
    min_sep: f64,
    extent: Option<f64>,
) -> Option<Vec<Point>> {
    let centre = brain_pixels[rng.random_range(0..brain_pixels.len())];
    let candidates: Vec<(usize, usize)> = match extent {
        Some(r) => brain_pixels
            .iter()
            .copied()
            .filter(|&(y, x)| {
                let dy = y as f64 - centre.0 as f64;
                let dx = x as f64 - centre.1 as f64;
                dy * dy + dx * dx <= r * r
            })
            .collect(),
        None => brain_pixels.to_vec(),
    };
    if candidates.len() < n {
        return None;
    }
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    for _ in 0..DRAWS_PER_ROUND {
        let (y, x) = candidates[rng.random_range(0..candidates.len())];
        let p = [x as f64, y as f64];
        let ok = pts
            .iter()
            .all(|q| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt() >= min_sep);
        if ok {
            pts.push(p);
            if pts.len() == n {
                return Some(pts);
            }
        }
    }
    None
}

/// Inpaints one synthetic defect into a copy of `img`.
///
/// Control points are drawn inside the brain foreground, the Bezier hull is
/// rasterised and clipped to the foreground, and the region is overwritten with
/// a `noise_base_shape` Gaussian noise grid upsampled bilinearly to image size.
/// Pixels outside the returned mask are left untouched.
pub fn generate_defect(img: &GrayImage, spec: &DefectSpec) -> Result<(GrayImage, DefectMask)> {
    spec.validate()?;
    let brain = locate_brain_default(img)?;
    generate_defect_in(img, &brain, spec)
}

/// Same as [`generate_defect`] with a precomputed foreground mask.
pub fn generate_defect_in(img: &GrayImage, brain: &DefectMask, spec: &DefectSpec) -> Result<(GrayImage, DefectMask)> {
    spec.validate()?;
    if !brain.same_shape(img) {
        return Err(ConsultError::InvalidArgument("brain mask shape differs from image".into()));
    }
    let (h, w) = (img.height(), img.width());
    let (y0, x0, y1, x1) = brain.bounding_box().ok_or(ConsultError::NoForeground)?;
    let diag = (((y1 - y0 + 1) as f64).powi(2) + ((x1 - x0 + 1) as f64).powi(2)).sqrt();
    let brain_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| brain.get(y, x))
        .collect();

    let mut rng = rng_from(spec.rng_seed);
    let mu = spec.mu.unwrap_or_else(|| rng.random_range(0..255) as f64);
    let sigma = spec.sigma.unwrap_or_else(|| rng.random_range(10.0..20.0));
    let extent = spec.extent.map(|e| e * diag);

    let mut mask = None;
    'attempts: for _ in 0..SHAPE_ATTEMPTS {
        let mut min_sep = spec.min_sep_fraction * diag;
        for _ in 0..SEPARATION_ROUNDS {
            if let Some(points) = sample_points(&mut rng, &brain_pixels, spec.n_control, min_sep, extent) {
                let hull = bezier_hull(&points, spec.edginess, spec.samples_per_segment)?;
                let m = fill_polygon(&hull, w, h).intersect(brain);
                if !m.is_empty() {
                    mask = Some(m);
                    break 'attempts;
                }
                continue 'attempts;
            }
            min_sep /= 2.0;
        }
        break;
    }
    let mask = mask.ok_or_else(|| {
        ConsultError::RegionTooSmall(format!(
            "could not place {} separated control points in a {}-pixel foreground",
            spec.n_control,
            brain_pixels.len()
        ))
    })?;

    let (nh, nw) = spec.noise_base_shape;
    let normal = Normal::new(mu, sigma).map_err(|e| ConsultError::InvalidArgument(e.to_string()))?;
    let base: Vec<f64> = (0..nh * nw).map(|_| normal.sample(&mut rng)).collect();
    let noise = resize_bilinear(&base, nh, nw, h, w);

    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                out.set(y, x, noise[y * w + x].clamp(0.0, 255.0) as f32);
            }
        }
    }
    Ok((out, mask))
}
