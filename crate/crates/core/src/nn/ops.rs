//! Forward and backward kernels for the layers used by the extractor.

use super::tensor::Map;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa + 1);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Map, g: &ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.cin {
        let plane = x.channel(ci);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, h: usize, w: usize, oh: usize, ow: usize) -> Map {
    let p = oh * ow;
    let mut dx = Map::zeros(g.cin, h, w);
    for ci in 0..g.cin {
        let plane = dx.channel_mut(ci);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Everything the backward pass needs from a convolution's forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d(x: &Map, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom, keep: bool) -> (Map, Option<ConvCache>) {
    debug_assert_eq!(x.c, g.cin);
    let (oh, ow) = g.out_size(x.h, x.w);
    let p = oh * ow;
    let cols = if is_pointwise(g) { x.data.clone() } else { im2col(x, g, oh, ow) };
    let mut out = Map::zeros(g.cout, oh, ow);
    if let Some(b) = bias {
        for co in 0..g.cout {
            out.channel_mut(co).iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(g.cout, g.patch(), p, weight, g.patch(), 1, &cols, p, 1, beta, &mut out.data);
    let cache = keep.then_some(ConvCache {
        cols,
        in_h: x.h,
        in_w: x.w,
    });
    (out, cache)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward(
    cache: &ConvCache,
    dy: &Map,
    weight: &[f64],
    g: &ConvGeom,
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) -> Map {
    let p = dy.h * dy.w;
    let kk = g.patch();
    gemm(g.cout, p, kk, &dy.data, p, 1, &cache.cols, 1, p, 1.0, grad_w);
    if let Some(gb) = grad_b {
        for co in 0..g.cout {
            gb[co] += dy.channel(co).iter().sum::<f64>();
        }
    }
    let mut dcols = vec![0.0; kk * p];
    gemm(kk, g.cout, p, weight, 1, kk, &dy.data, p, 1, 0.0, &mut dcols);
    if is_pointwise(g) {
        Map::from_vec(g.cin, cache.in_h, cache.in_w, dcols)
    } else {
        col2im(&dcols, g, cache.in_h, cache.in_w, dy.h, dy.w)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Frozen-statistics normalisation: `y = (x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn norm_forward(x: &Map, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Map {
    let mut y = x.clone();
    for c in 0..x.c {
        let s = gamma[c] / (var[c] + NORM_EPS).sqrt();
        let t = beta[c] - mean[c] * s;
        y.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + t);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn norm_backward(
    x: &Map,
    dy: &Map,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Map {
    let mut dx = dy.clone();
    for c in 0..x.c {
        let inv = 1.0 / (var[c] + NORM_EPS).sqrt();
        let (mut gg, mut gb) = (0.0, 0.0);
        for (xv, dv) in x.channel(c).iter().zip(dy.channel(c)) {
            gg += dv * (xv - mean[c]) * inv;
            gb += dv;
        }
        grad_gamma[c] += gg;
        grad_beta[c] += gb;
        let s = gamma[c] * inv;
        dx.channel_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    dx
}

/// Leaky rectifier; `slope = 0` is a plain ReLU.
pub fn act_forward(x: &Map, slope: f64) -> Map {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= slope
        }
    });
    y
}

pub fn act_backward(x: &Map, dy: &Map, slope: f64) -> Map {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(&x.data).for_each(|(d, &v)| {
        if v < 0.0 {
            *d *= slope
        }
    });
    dx
}

/// 3x3 stride-2 max pooling with one pixel of padding; returns argmax indices.
pub fn maxpool3s2(x: &Map) -> (Map, Vec<usize>) {
    let oh = (x.h + 2 - 3) / 2 + 1;
    let ow = (x.w + 2 - 3) / 2 + 1;
    let mut y = Map::zeros(x.c, oh, ow);
    let mut idx = vec![0usize; x.c * oh * ow];
    for c in 0..x.c {
        let plane = x.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let i = iy as usize * x.w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            bi = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y.data[o] = best;
                idx[o] = c * x.h * x.w + bi;
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(dy: &Map, idx: &[usize], c: usize, h: usize, w: usize) -> Map {
    let mut dx = Map::zeros(c, h, w);
    for (d, &i) in dy.data.iter().zip(idx) {
        dx.data[i] += d;
    }
    dx
}

/// Stride-1 box average with `same` padding; borders average only valid cells.
pub fn box_mean(x: &Map, k: usize) -> Map {
    if k <= 1 {
        return x.clone();
    }
    let r = (k / 2) as isize;
    let mut y = Map::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for i in 0..x.h as isize {
            for j in 0..x.w as isize {
                let (mut acc, mut n) = (0.0, 0usize);
                for di in -r..=r {
                    for dj in -r..=r {
                        let (ii, jj) = (i + di, j + dj);
                        if ii >= 0 && jj >= 0 && ii < x.h as isize && jj < x.w as isize {
                            acc += src[ii as usize * x.w + jj as usize];
                            n += 1;
                        }
                    }
                }
                dst[i as usize * x.w + j as usize] = acc / n as f64;
            }
        }
    }
    y
}

pub fn box_mean_backward(dy: &Map, k: usize) -> Map {
    if k <= 1 {
        return dy.clone();
    }
    let r = (k / 2) as isize;
    let (h, w) = (dy.h as isize, dy.w as isize);
    let count = |i: isize, j: isize| {
        let rows = (i + r).min(h - 1) - (i - r).max(0) + 1;
        let cols = (j + r).min(w - 1) - (j - r).max(0) + 1;
        (rows * cols) as f64
    };
    let mut dx = Map::zeros(dy.c, dy.h, dy.w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let g = src[(i * w + j) as usize] / count(i, j);
                for di in -r..=r {
                    for dj in -r..=r {
                        let (ii, jj) = (i + di, j + dj);
                        if ii >= 0 && jj >= 0 && ii < h && jj < w {
                            dst[(ii * w + jj) as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
