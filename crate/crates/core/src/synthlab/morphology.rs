//! Foreground localisation: threshold, disk closing/opening, largest component.

use crate::error::{ConsultError, Result};
use crate::image::{DefectMask, GrayImage};

/// Threshold selection for [`locate_brain`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Otsu's method over the nonzero pixels.
    Otsu,
    Fixed(f32),
}

pub const DEFAULT_MORPH_RADIUS: usize = 5;

/// Otsu threshold over pixels with intensity > 0, on a 256-bin histogram.
pub fn otsu_threshold(img: &GrayImage) -> Option<f32> {
    let mut hist = [0u64; 256];
    for &p in img.pixels() {
        if p > 0.0 {
            hist[p.round().clamp(0.0, 255.0) as usize] += 1;
        }
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let (mut best, mut best_t) = (-1.0f64, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // Pixels strictly above the class boundary are foreground.
    Some(best_t as f32 + 0.5)
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Out-of-image pixels count as background for dilation and foreground for erosion.
fn morph(mask: &[bool], h: usize, w: usize, offsets: &[(i64, i64)], dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            for &(dy, dx) in offsets {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                let v = if inside {
                    mask[yy as usize * w + xx as usize]
                } else {
                    !dilate
                };
                if dilate && v {
                    hit = true;
                    break;
                }
                if !dilate && !v {
                    hit = false;
                    break;
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    morph(mask, h, w, &disk_offsets(radius), true)
}

pub fn erode(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    morph(mask, h, w, &disk_offsets(radius), false)
}

/// 8-connected component labels (0 = background) and the component count.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Keeps only the largest 8-connected component; ties go to the lowest label.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (labels, n) = label_components(mask, h, w);
    if n == 0 {
        return vec![false; h * w];
    }
    let mut sizes = vec![0usize; n as usize + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let best = (1..=n as usize).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap() as u32;
    labels.iter().map(|&l| l == best).collect()
}

/// Rough brain foreground: threshold, closing then opening with a disk, then the
/// largest connected component.
pub fn locate_brain(img: &GrayImage, threshold: Threshold, morph_radius: usize) -> Result<DefectMask> {
    let (h, w) = (img.height(), img.width());
    let t = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => otsu_threshold(img).ok_or(ConsultError::NoForeground)?,
    };
    let binary: Vec<bool> = img.pixels().iter().map(|&p| p > t).collect();
    if !binary.iter().any(|&b| b) {
        return Err(ConsultError::NoForeground);
    }
    let cleaned = if morph_radius > 0 {
        let closed = erode(&dilate(&binary, h, w, morph_radius), h, w, morph_radius);
        dilate(&erode(&closed, h, w, morph_radius), h, w, morph_radius)
    } else {
        binary
    };
    let fg = largest_component(&cleaned, h, w);
    if !fg.iter().any(|&b| b) {
        return Err(ConsultError::NoForeground);
    }
    DefectMask::from_vec(w, h, fg)
}

/// [`locate_brain`] with Otsu thresholding and the default radius.
pub fn locate_brain_default(img: &GrayImage) -> Result<DefectMask> {
    locate_brain(img, Threshold::Otsu, DEFAULT_MORPH_RADIUS)
}
