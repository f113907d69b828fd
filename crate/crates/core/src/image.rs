//! Grayscale images, boolean masks and the PNG boundary.

use std::path::Path;

use crate::error::{ConsultError, Result};

pub const MIN_SIDE: usize = 32;

/// Single-channel intensity image, row-major, values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(ConsultError::InvalidArgument(format!(
                "image {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != width * height {
            return Err(ConsultError::InvalidArgument(format!(
                "expected {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(ConsultError::InvalidArgument(format!(
                "pixel value {p} outside [0, 255]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 255]`.
    pub fn from_fn_clamped(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(y, x);
                let v = if v.is_finite() { v.clamp(0.0, 255.0) } else { 0.0 };
                pixels.push(v as f32);
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Writes a pixel, clamping into range.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 255.0);
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Resamples to `width x height` with bilinear interpolation.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let plane = crate::raster::resize_bilinear(&self.to_f64(), self.height, self.width, height, width);
        Self::from_fn_clamped(width, height, |y, x| plane[y * width + x])
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let dynamic = image::open(path.as_ref())?;
        let gray = dynamic.to_luma8();
        let (w, h) = gray.dimensions();
        Self::new(
            w as usize,
            h as usize,
            gray.into_raw().into_iter().map(f32::from).collect(),
        )
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }
}

/// Boolean region mask with the shape of its paired image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefectMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl DefectMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(ConsultError::InvalidArgument(format!(
                "mask length {} does not match {width}x{height}",
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.mask[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn same_shape(&self, img: &GrayImage) -> bool {
        self.width == img.width() && self.height == img.height()
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &DefectMask) -> bool {
        self.mask.len() == other.mask.len()
            && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn intersect(&self, other: &DefectMask) -> DefectMask {
        DefectMask {
            width: self.width,
            height: self.height,
            mask: self.mask.iter().zip(&other.mask).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let gray = image::open(path.as_ref())?.to_luma8();
        let (w, h) = gray.dimensions();
        Self::from_vec(
            w as usize,
            h as usize,
            gray.into_raw().into_iter().map(|v| v >= 128).collect(),
        )
    }

    /// Stored as 0/255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_out_of_range() {
        assert!(GrayImage::filled(16, 64, 0.0).is_err());
        assert!(GrayImage::new(32, 32, vec![300.0; 1024]).is_err());
        assert!(GrayImage::new(32, 32, vec![0.0; 10]).is_err());
    }

    #[test]
    fn png_round_trip_keeps_integer_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn_clamped(40, 36, |y, x| ((y * 7 + x * 3) % 256) as f64).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(GrayImage::load_png(&path).unwrap(), img);

        let mut mask = DefectMask::empty(40, 36);
        mask.set(3, 4, true);
        let mpath = dir.path().join("m.png");
        mask.save_png(&mpath).unwrap();
        assert_eq!(DefectMask::load_png(&mpath).unwrap(), mask);
    }

    #[test]
    fn rgb_input_is_converted_by_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let rgb = image::RgbImage::from_pixel(32, 32, image::Rgb([255, 0, 0]));
        rgb.save(&path).unwrap();
        let img = GrayImage::load_png(&path).unwrap();
        // Rec. 709 red weight.
        assert!((img.get(0, 0) - 54.0).abs() <= 1.0, "{}", img.get(0, 0));
    }
}
