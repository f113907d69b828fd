//! Channel-then-spatial attention gate applied to a stage output.

use crate::nn::ops::{conv2d, conv2d_backward, sigmoid, ConvCache, ConvGeom};
use crate::nn::{Map, WeightSet};

pub(crate) struct AttnNames {
    pub fc1_w: String,
    pub fc1_b: String,
    pub fc2_w: String,
    pub fc2_b: String,
    pub sp_w: String,
    pub sp_b: String,
}

impl AttnNames {
    pub fn new(stage: usize) -> Self {
        let p = format!("attn{stage}");
        Self {
            fc1_w: format!("{p}.fc1.weight"),
            fc1_b: format!("{p}.fc1.bias"),
            fc2_w: format!("{p}.fc2.weight"),
            fc2_b: format!("{p}.fc2.bias"),
            sp_w: format!("{p}.spatial.weight"),
            sp_b: format!("{p}.spatial.bias"),
        }
    }
}

pub(crate) struct AttnCache {
    x: Map,
    avg: Vec<f64>,
    max: Vec<f64>,
    max_idx: Vec<usize>,
    pre_a: Vec<f64>,
    pre_m: Vec<f64>,
    channel_gate: Vec<f64>,
    y1: Map,
    smax_idx: Vec<usize>,
    sp_cache: ConvCache,
    spatial_gate: Vec<f64>,
}

pub(crate) struct AttnOut {
    pub y: Map,
    pub channel_gate: Vec<f64>,
    pub spatial_gate: Vec<f64>,
    pub cache: Option<AttnCache>,
}

fn mlp_hidden(w1: &[f64], b1: &[f64], v: &[f64], hid: usize) -> Vec<f64> {
    let c = v.len();
    (0..hid)
        .map(|j| b1[j] + w1[j * c..(j + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn mlp_out(w2: &[f64], h: &[f64], c: usize) -> Vec<f64> {
    let hid = h.len();
    (0..c)
        .map(|i| {
            w2[i * hid..(i + 1) * hid]
                .iter()
                .zip(h)
                .map(|(a, b)| a * b.max(0.0))
                .sum::<f64>()
        })
        .collect()
}

pub(crate) fn forward(x: &Map, ws: &WeightSet, n: &AttnNames, hid: usize, k: usize, keep: bool) -> AttnOut {
    let c = x.c;
    let p = x.plane();
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut max_idx = vec![0usize; c];
    for ch in 0..c {
        let plane = x.channel(ch);
        avg[ch] = plane.iter().sum::<f64>() / p as f64;
        for (i, &v) in plane.iter().enumerate() {
            if v > max[ch] {
                max[ch] = v;
                max_idx[ch] = i;
            }
        }
    }
    let (w1, b1, w2, b2) = (ws.data(&n.fc1_w), ws.data(&n.fc1_b), ws.data(&n.fc2_w), ws.data(&n.fc2_b));
    let pre_a = mlp_hidden(w1, b1, &avg, hid);
    let pre_m = mlp_hidden(w1, b1, &max, hid);
    let oa = mlp_out(w2, &pre_a, c);
    let om = mlp_out(w2, &pre_m, c);
    let channel_gate: Vec<f64> = (0..c).map(|i| sigmoid(oa[i] + om[i] + 2.0 * b2[i])).collect();

    let mut y1 = x.clone();
    for ch in 0..c {
        let g = channel_gate[ch];
        y1.channel_mut(ch).iter_mut().for_each(|v| *v *= g);
    }

    let mut pooled = Map::zeros(2, x.h, x.w);
    let mut smax_idx = vec![0usize; p];
    for i in 0..p {
        let mut s = 0.0;
        let mut best = f64::NEG_INFINITY;
        for ch in 0..c {
            let v = y1.data[ch * p + i];
            s += v;
            if v > best {
                best = v;
                smax_idx[i] = ch;
            }
        }
        pooled.data[i] = s / c as f64;
        pooled.data[p + i] = best;
    }
    let geom = ConvGeom {
        cin: 2,
        cout: 1,
        k,
        stride: 1,
        pad: k / 2,
    };
    let (z, sp_cache) = conv2d(&pooled, ws.data(&n.sp_w), Some(ws.data(&n.sp_b)), &geom, keep);
    let spatial_gate: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
    let mut y = y1.clone();
    for ch in 0..c {
        y.channel_mut(ch).iter_mut().zip(&spatial_gate).for_each(|(v, g)| *v *= g);
    }
    let cache = keep.then(|| AttnCache {
        x: x.clone(),
        avg,
        max,
        max_idx,
        pre_a,
        pre_m,
        channel_gate: channel_gate.clone(),
        y1,
        smax_idx,
        sp_cache: sp_cache.expect("kept"),
        spatial_gate: spatial_gate.clone(),
    });
    AttnOut {
        y,
        channel_gate,
        spatial_gate,
        cache,
    }
}

pub(crate) fn backward(
    cache: &AttnCache,
    dy: &Map,
    ws: &WeightSet,
    n: &AttnNames,
    k: usize,
    grads: &mut WeightSet,
) -> Map {
    let x = &cache.x;
    let (c, p) = (x.c, x.plane());
    // Spatial gate.
    let mut dz = Map::zeros(1, x.h, x.w);
    let mut dy1 = dy.clone();
    for i in 0..p {
        let g = cache.spatial_gate[i];
        let mut dg = 0.0;
        for ch in 0..c {
            dg += dy.data[ch * p + i] * cache.y1.data[ch * p + i];
            dy1.data[ch * p + i] *= g;
        }
        dz.data[i] = dg * g * (1.0 - g);
    }
    let geom = ConvGeom {
        cin: 2,
        cout: 1,
        k,
        stride: 1,
        pad: k / 2,
    };
    let mut gw = vec![0.0; 2 * k * k];
    let mut gb = vec![0.0; 1];
    let dpooled = conv2d_backward(&cache.sp_cache, &dz, ws.data(&n.sp_w), &geom, &mut gw, Some(&mut gb));
    add(grads.data_mut(&n.sp_w), &gw);
    add(grads.data_mut(&n.sp_b), &gb);
    for i in 0..p {
        let da = dpooled.data[i] / c as f64;
        for ch in 0..c {
            dy1.data[ch * p + i] += da;
        }
        dy1.data[cache.smax_idx[i] * p + i] += dpooled.data[p + i];
    }

    // Channel gate.
    let mut dx = dy1.clone();
    let mut dout = vec![0.0; c];
    for ch in 0..c {
        let g = cache.channel_gate[ch];
        let dg: f64 = dy1.channel(ch).iter().zip(x.channel(ch)).map(|(a, b)| a * b).sum();
        dout[ch] = dg * g * (1.0 - g);
        dx.channel_mut(ch).iter_mut().for_each(|v| *v *= g);
    }
    let hid = cache.pre_a.len();
    let (w1, w2) = (ws.data(&n.fc1_w).to_vec(), ws.data(&n.fc2_w).to_vec());
    let mut g_w1 = vec![0.0; hid * c];
    let mut g_b1 = vec![0.0; hid];
    let mut g_w2 = vec![0.0; c * hid];
    let g_b2: Vec<f64> = dout.iter().map(|d| 2.0 * d).collect();
    let mut branch = |pre: &[f64], input: &[f64]| -> Vec<f64> {
        let mut dh = vec![0.0; hid];
        for i in 0..c {
            for j in 0..hid {
                g_w2[i * hid + j] += dout[i] * pre[j].max(0.0);
                if pre[j] > 0.0 {
                    dh[j] += w2[i * hid + j] * dout[i];
                }
            }
        }
        let mut din = vec![0.0; c];
        for j in 0..hid {
            g_b1[j] += dh[j];
            for i in 0..c {
                g_w1[j * c + i] += dh[j] * input[i];
                din[i] += w1[j * c + i] * dh[j];
            }
        }
        din
    };
    let d_avg = branch(&cache.pre_a, &cache.avg);
    let d_max = branch(&cache.pre_m, &cache.max);
    add(grads.data_mut(&n.fc1_w), &g_w1);
    add(grads.data_mut(&n.fc1_b), &g_b1);
    add(grads.data_mut(&n.fc2_w), &g_w2);
    add(grads.data_mut(&n.fc2_b), &g_b2);
    for ch in 0..c {
        let da = d_avg[ch] / p as f64;
        dx.channel_mut(ch).iter_mut().for_each(|v| *v += da);
        dx.data[ch * p + cache.max_idx[ch]] += d_max[ch];
    }
    dx
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
