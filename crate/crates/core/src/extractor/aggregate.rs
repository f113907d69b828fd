//! Resize-and-concatenate aggregation of stage maps into a patch-feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{ConsultError, Result};
use crate::nn::ops::{box_mean, box_mean_backward};
use crate::nn::Map;
use crate::raster::{resize_bilinear, resize_bilinear_backward};

/// Spatially indexed feature vectors, stored cell-major: cell `(i, j)` owns
/// `data[(i * width + j) * dim ..][..dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub stage_dims: Vec<usize>,
    /// Input pixels per grid cell along each axis.
    pub spatial_scale: f64,
}

impl PatchFeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 || data.len() != height * width * dim {
            return Err(ConsultError::InvalidArgument(format!(
                "grid {height}x{width}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
            stage_dims: vec![dim],
            spatial_scale: 1.0,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        self.cell(i * self.width + j)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn same_shape(&self, other: &PatchFeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Shapes needed to route grid gradients back to the stage maps.
#[derive(Clone, Debug)]
pub struct AggregateShape {
    stages: Vec<(usize, usize, usize)>,
    height: usize,
    width: usize,
    neighborhood: usize,
}

fn to_cell_major(m: &Map) -> Vec<f64> {
    let p = m.plane();
    let mut out = vec![0.0; m.data.len()];
    for c in 0..m.c {
        for (i, v) in m.channel(c).iter().enumerate() {
            out[i * m.c + c] = *v;
        }
    }
    debug_assert_eq!(out.len(), p * m.c);
    out
}

fn from_cell_major(data: &[f64], c: usize, h: usize, w: usize) -> Map {
    let mut m = Map::zeros(c, h, w);
    for ch in 0..c {
        for (i, v) in m.channel_mut(ch).iter_mut().enumerate() {
            *v = data[i * c + ch];
        }
    }
    m
}

/// Aggregates stage maps (earliest first) into a patch grid, returning the
/// shape record used by [`aggregate_backward`].
pub fn aggregate_with_shape(
    stage_maps: &[Map],
    neighborhood: usize,
    input_height: usize,
) -> Result<(PatchFeatureGrid, AggregateShape)> {
    let first = stage_maps
        .first()
        .ok_or_else(|| ConsultError::InvalidArgument("no stage maps to aggregate".into()))?;
    if neighborhood % 2 == 0 {
        return Err(ConsultError::InvalidArgument("patch neighborhood must be odd".into()));
    }
    let (h, w) = (first.h, first.w);
    let dim: usize = stage_maps.iter().map(|m| m.c).sum();
    let mut cat = Map::zeros(dim, h, w);
    let mut offset = 0;
    for m in stage_maps {
        for c in 0..m.c {
            let dst = cat.channel_mut(offset + c);
            if m.h == h && m.w == w {
                dst.copy_from_slice(m.channel(c));
            } else {
                dst.copy_from_slice(&resize_bilinear(m.channel(c), m.h, m.w, h, w));
            }
        }
        offset += m.c;
    }
    let pooled = if neighborhood > 1 { box_mean(&cat, neighborhood) } else { cat };
    let grid = PatchFeatureGrid {
        height: h,
        width: w,
        dim,
        data: to_cell_major(&pooled),
        stage_dims: stage_maps.iter().map(|m| m.c).collect(),
        spatial_scale: input_height as f64 / h as f64,
    };
    let shape = AggregateShape {
        stages: stage_maps.iter().map(|m| (m.c, m.h, m.w)).collect(),
        height: h,
        width: w,
        neighborhood,
    };
    Ok((grid, shape))
}

/// Resizes every stage map to the first one's size, concatenates channels and
/// average-pools each cell over its neighborhood.
pub fn aggregate_layers(stage_maps: &[Map], neighborhood: usize) -> Result<PatchFeatureGrid> {
    let h = stage_maps.first().map_or(1, |m| m.h);
    aggregate_with_shape(stage_maps, neighborhood, h).map(|(g, _)| g)
}

/// Gradient of the aggregation with respect to each stage map.
pub fn aggregate_backward(grad: &[f64], shape: &AggregateShape) -> Vec<Map> {
    let dim: usize = shape.stages.iter().map(|s| s.0).sum();
    let mut d = from_cell_major(grad, dim, shape.height, shape.width);
    if shape.neighborhood > 1 {
        d = box_mean_backward(&d, shape.neighborhood);
    }
    let mut offset = 0;
    shape
        .stages
        .iter()
        .map(|&(c, sh, sw)| {
            let mut m = Map::zeros(c, sh, sw);
            for ch in 0..c {
                let src = d.channel(offset + ch);
                if sh == shape.height && sw == shape.width {
                    m.channel_mut(ch).copy_from_slice(src);
                } else {
                    m.channel_mut(ch)
                        .copy_from_slice(&resize_bilinear_backward(src, sh, sw, shape.height, shape.width));
                }
            }
            offset += c;
            m
        })
        .collect()
}
