//! Residual trunk with optional attention after each stage, forward and backward.

use rand_distr::{Distribution, Normal};

use super::attention::{self, AttnCache, AttnNames};
use super::config::{is_trainable, BlockKind, ExtractorConfig};
use crate::error::{ConsultError, Result};
use crate::image::GrayImage;
use crate::nn::ops::{
    act_backward, act_forward, conv2d, conv2d_backward, maxpool3s2, maxpool_backward, norm_backward, norm_forward,
    ConvCache, ConvGeom,
};
use crate::nn::{Map, Tensor, WeightSet};
use crate::seed::{child_rng, TAG_INIT};

const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct BlockSpec {
    convs: Vec<ConvSpec>,
    norms: Vec<String>,
    down: Option<(ConvSpec, String)>,
}

#[derive(Clone, Debug)]
struct StageSpec {
    index: usize,
    blocks: Vec<BlockSpec>,
    channels: usize,
}

/// Static layer layout derived from an [`ExtractorConfig`].
#[derive(Clone, Debug)]
pub struct Architecture {
    cfg: ExtractorConfig,
    stem: ConvSpec,
    stages: Vec<StageSpec>,
}

fn conv(name: String, cin: usize, cout: usize, k: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        name,
        geom: ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        },
    }
}

impl Architecture {
    pub fn new(cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = conv("stem.conv.weight".into(), 3, cfg.base_width, 7, 2);
        let mut stages = Vec::new();
        let mut cin = cfg.base_width;
        for s in 1..=cfg.deepest_stage() {
            let width = cfg.stage_width(s);
            let cout = cfg.stage_channels(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage()[s - 1] {
                let stride = if s > 1 && b == 0 { 2 } else { 1 };
                let p = format!("stage{s}.block{b}");
                let (convs, norms) = match cfg.block_kind() {
                    BlockKind::Basic => (
                        vec![
                            conv(format!("{p}.conv1.weight"), cin, width, 3, stride),
                            conv(format!("{p}.conv2.weight"), width, width, 3, 1),
                        ],
                        vec![format!("{p}.norm1"), format!("{p}.norm2")],
                    ),
                    BlockKind::Bottleneck => (
                        vec![
                            conv(format!("{p}.conv1.weight"), cin, width, 1, 1),
                            conv(format!("{p}.conv2.weight"), width, width, 3, stride),
                            conv(format!("{p}.conv3.weight"), width, cout, 1, 1),
                        ],
                        vec![format!("{p}.norm1"), format!("{p}.norm2"), format!("{p}.norm3")],
                    ),
                };
                let down = (stride != 1 || cin != cout).then(|| {
                    (
                        conv(format!("{p}.down.conv.weight"), cin, cout, 1, stride),
                        format!("{p}.down.norm"),
                    )
                });
                blocks.push(BlockSpec { convs, norms, down });
                cin = cout;
            }
            stages.push(StageSpec {
                index: s,
                blocks,
                channels: cout,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    fn norm_names(&self) -> Vec<String> {
        let mut out = vec!["stem.norm".to_string()];
        for st in &self.stages {
            for b in &st.blocks {
                out.extend(b.norms.iter().cloned());
                if let Some((_, n)) = &b.down {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    /// Every tensor the configuration expects, with its shape, in forward order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let norm = |out: &mut Vec<(String, Vec<usize>)>, n: &str, c: usize| {
            for suffix in ["gamma", "beta", "mean", "var"] {
                out.push((format!("{n}.{suffix}"), vec![c]));
            }
        };
        out.push((self.stem.name.clone(), self.stem.geom.weight_shape().to_vec()));
        norm(&mut out, "stem.norm", self.cfg.base_width);
        for st in &self.stages {
            for b in &st.blocks {
                for (cv, n) in b.convs.iter().zip(&b.norms) {
                    out.push((cv.name.clone(), cv.geom.weight_shape().to_vec()));
                    norm(&mut out, n, cv.geom.cout);
                }
                if let Some((cv, n)) = &b.down {
                    out.push((cv.name.clone(), cv.geom.weight_shape().to_vec()));
                    norm(&mut out, n, cv.geom.cout);
                }
            }
            if self.cfg.use_attention {
                let c = st.channels;
                let hid = self.cfg.attention_hidden(c);
                let k = self.cfg.spatial_kernel;
                let a = AttnNames::new(st.index);
                out.push((a.fc1_w, vec![hid, c]));
                out.push((a.fc1_b, vec![hid]));
                out.push((a.fc2_w, vec![c, hid]));
                out.push((a.fc2_b, vec![c]));
                out.push((a.sp_w, vec![1, 2, k, k]));
                out.push((a.sp_b, vec![1]));
            }
        }
        out
    }

    /// Checks that `ws` holds every expected tensor with the expected shape.
    pub fn validate_weights(&self, ws: &WeightSet) -> Result<()> {
        for (name, shape) in self.tensor_specs() {
            match ws.get(&name) {
                None => return Err(ConsultError::Config(format!("weight set lacks `{name}`"))),
                Some(t) if t.shape != shape => {
                    return Err(ConsultError::Config(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// He-normal convolutions, identity norms, and attention whose final layers
    /// are zero so every gate starts at exactly 0.5.
    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let mut ws = WeightSet::new();
        for (i, (name, shape)) in self.tensor_specs().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".gamma") || name.ends_with(".var") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".beta")
                || name.ends_with(".mean")
                || name.ends_with(".bias")
                || name.contains(".fc2.")
                || name.contains(".spatial.")
            {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = child_rng(seed, TAG_INIT, i as u64);
                Tensor::from_vec(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            };
            ws.insert(name, t);
        }
        ws.metadata.insert("init".into(), format!("he-normal:{seed}"));
        ws
    }

    /// Sets every norm's frozen statistics, in forward order, to the per-channel
    /// mean and variance of its input over `images`.
    pub fn calibrate_norms(&self, ws: &mut WeightSet, images: &[GrayImage]) -> Result<()> {
        if images.is_empty() {
            return Err(ConsultError::InvalidArgument("calibration needs at least one image".into()));
        }
        for norm in self.norm_names() {
            let captured = crate::par::par_map!(images, |img| {
                let net = Network { arch: self, ws };
                net.capture_norm_input(img, &norm)
            });
            let c = captured[0].c;
            let (mut sum, mut sq, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
            for m in &captured {
                for ch in 0..c {
                    for v in m.channel(ch) {
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
                count += m.plane();
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let var: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / count as f64 - m * m).max(1e-6))
                .collect();
            ws.data_mut(&format!("{norm}.mean")).copy_from_slice(&mean);
            ws.data_mut(&format!("{norm}.var")).copy_from_slice(&var);
        }
        ws.metadata.insert("norm_calibration_images".into(), images.len().to_string());
        Ok(())
    }
}

/// Gates and activation summaries recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionState {
    pub input_size: (usize, usize),
    pub stages: Vec<StageAttention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageAttention {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    /// Per-channel gate, absent when attention is disabled.
    pub channel_gate: Option<Vec<f64>>,
    /// Per-position gate, absent when attention is disabled.
    pub spatial_gate: Option<Vec<f64>>,
    /// Channel mean of the (gated) stage output.
    pub activation_mean: Vec<f64>,
}

struct NormCache {
    input: Map,
}

struct BlockCache {
    convs: Vec<ConvCache>,
    norm_in: Vec<Map>,
    act_in: Vec<Map>,
    down: Option<(ConvCache, Map)>,
    sum: Map,
}

struct StageCache {
    blocks: Vec<BlockCache>,
    attn: Option<AttnCache>,
}

struct StemCache {
    conv: ConvCache,
    norm: NormCache,
    act_in: Map,
    pool_idx: Vec<usize>,
    pool_in: (usize, usize, usize),
}

pub struct NetCache {
    stem: StemCache,
    stages: Vec<StageCache>,
}

/// Output of one forward pass.
pub struct ForwardPass {
    /// Outputs of the stages in `stages_used`, in that order.
    pub stage_maps: Vec<Map>,
    pub attention: AttentionState,
    cache: Option<NetCache>,
}

impl ForwardPass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

enum Flow {
    Continue(Map),
    Captured(Map),
}

/// Borrowed view of an architecture plus its weights.
pub struct Network<'a> {
    pub arch: &'a Architecture,
    pub ws: &'a WeightSet,
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a Architecture, ws: &'a WeightSet) -> Result<Self> {
        arch.validate_weights(ws)?;
        Ok(Self { arch, ws })
    }

    fn cfg(&self) -> &ExtractorConfig {
        &self.arch.cfg
    }

    /// Normalises intensities and replicates the single channel three times.
    pub fn input_map(img: &GrayImage) -> Map {
        let (h, w) = (img.height(), img.width());
        let mut m = Map::zeros(3, h, w);
        for c in 0..3 {
            let dst = m.channel_mut(c);
            for (d, &p) in dst.iter_mut().zip(img.pixels()) {
                *d = (p as f64 / 255.0 - INPUT_MEAN[c]) / INPUT_STD[c];
            }
        }
        m
    }

    fn norm(&self, name: &str, x: &Map) -> Map {
        norm_forward(
            x,
            self.ws.data(&format!("{name}.gamma")),
            self.ws.data(&format!("{name}.beta")),
            self.ws.data(&format!("{name}.mean")),
            self.ws.data(&format!("{name}.var")),
        )
    }

    fn norm_back(&self, name: &str, x: &Map, dy: &Map, grads: &mut WeightSet) -> Map {
        let c = x.c;
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let dx = norm_backward(
            x,
            dy,
            self.ws.data(&format!("{name}.gamma")),
            self.ws.data(&format!("{name}.mean")),
            self.ws.data(&format!("{name}.var")),
            &mut gg,
            &mut gb,
        );
        add(grads.data_mut(&format!("{name}.gamma")), &gg);
        add(grads.data_mut(&format!("{name}.beta")), &gb);
        dx
    }

    fn conv_back(&self, spec: &ConvSpec, cache: &ConvCache, dy: &Map, grads: &mut WeightSet) -> Map {
        let w = self.ws.data(&spec.name);
        let mut gw = vec![0.0; w.len()];
        let dx = conv2d_backward(cache, dy, w, &spec.geom, &mut gw, None);
        add(grads.data_mut(&spec.name), &gw);
        dx
    }

    fn block_forward(&self, b: &BlockSpec, x: &Map, keep: bool, capture: Option<&str>) -> (Flow, Option<BlockCache>) {
        let slope = self.cfg().slope();
        let n = b.convs.len();
        let mut convs = Vec::new();
        let mut norm_in = Vec::new();
        let mut act_in = Vec::new();
        let mut h = x.clone();
        for i in 0..n {
            let (c, cc) = conv2d(&h, self.ws.data(&b.convs[i].name), None, &b.convs[i].geom, keep);
            if capture == Some(b.norms[i].as_str()) {
                return (Flow::Captured(c), None);
            }
            let z = self.norm(&b.norms[i], &c);
            if keep {
                convs.push(cc.unwrap());
                norm_in.push(c);
            }
            if i + 1 < n {
                h = act_forward(&z, slope);
                if keep {
                    act_in.push(z);
                }
            } else {
                h = z;
            }
        }
        let mut down_cache = None;
        let shortcut = match &b.down {
            Some((cv, nn)) => {
                let (c, cc) = conv2d(x, self.ws.data(&cv.name), None, &cv.geom, keep);
                if capture == Some(nn.as_str()) {
                    return (Flow::Captured(c), None);
                }
                let z = self.norm(nn, &c);
                if keep {
                    down_cache = Some((cc.unwrap(), c));
                }
                z
            }
            None => x.clone(),
        };
        h.add_assign(&shortcut);
        let out = act_forward(&h, slope);
        let cache = keep.then_some(BlockCache {
            convs,
            norm_in,
            act_in,
            down: down_cache,
            sum: h,
        });
        (Flow::Continue(out), cache)
    }

    fn block_backward(&self, b: &BlockSpec, cache: &BlockCache, dy: &Map, grads: &mut WeightSet) -> Map {
        let slope = self.cfg().slope();
        let dsum = act_backward(&cache.sum, dy, slope);
        let n = b.convs.len();
        let mut d = dsum.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                d = act_backward(&cache.act_in[i], &d, slope);
            }
            d = self.norm_back(&b.norms[i], &cache.norm_in[i], &d, grads);
            d = self.conv_back(&b.convs[i], &cache.convs[i], &d, grads);
        }
        match (&b.down, &cache.down) {
            (Some((cv, nn)), Some((cc, nin))) => {
                let ds = self.norm_back(nn, nin, &dsum, grads);
                d.add_assign(&self.conv_back(cv, cc, &ds, grads));
            }
            _ => d.add_assign(&dsum),
        }
        d
    }

    fn run(&self, img: &GrayImage, keep: bool, capture: Option<&str>) -> std::result::Result<ForwardPass, Map> {
        let cfg = self.cfg();
        let slope = cfg.slope();
        let x = Self::input_map(img);
        let (c, cc) = conv2d(&x, self.ws.data(&self.arch.stem.name), None, &self.arch.stem.geom, keep);
        if capture == Some("stem.norm") {
            return Err(c);
        }
        let z = self.norm("stem.norm", &c);
        let a = act_forward(&z, slope);
        let (mut h, pool_idx) = maxpool3s2(&a);
        let stem = keep.then(|| StemCache {
            conv: cc.unwrap(),
            norm: NormCache { input: c },
            act_in: z,
            pool_idx,
            pool_in: (a.c, a.h, a.w),
        });

        let mut stage_caches = Vec::new();
        let mut stage_maps = Vec::new();
        let mut attention = AttentionState {
            input_size: (img.height(), img.width()),
            stages: Vec::new(),
        };
        for st in &self.arch.stages {
            let mut blocks = Vec::new();
            for b in &st.blocks {
                match self.block_forward(b, &h, keep, capture) {
                    (Flow::Continue(out), bc) => {
                        h = out;
                        if let Some(bc) = bc {
                            blocks.push(bc);
                        }
                    }
                    (Flow::Captured(m), _) => return Err(m),
                }
            }
            let mut attn_cache = None;
            let (mut cg, mut sg) = (None, None);
            if cfg.use_attention {
                let names = AttnNames::new(st.index);
                let out = attention::forward(
                    &h,
                    self.ws,
                    &names,
                    cfg.attention_hidden(st.channels),
                    cfg.spatial_kernel,
                    keep,
                );
                h = out.y;
                attn_cache = out.cache;
                cg = Some(out.channel_gate);
                sg = Some(out.spatial_gate);
            }
            if cfg.stages_used.contains(&st.index) {
                attention.stages.push(StageAttention {
                    stage: st.index,
                    height: h.h,
                    width: h.w,
                    channel_gate: cg,
                    spatial_gate: sg,
                    activation_mean: h.channel_mean(),
                });
                stage_maps.push(h.clone());
            }
            if keep {
                stage_caches.push(StageCache {
                    blocks,
                    attn: attn_cache,
                });
            }
        }
        Ok(ForwardPass {
            stage_maps,
            attention,
            cache: stem.map(|stem| NetCache {
                stem,
                stages: stage_caches,
            }),
        })
    }

    /// Runs the trunk. `keep` retains what [`Network::backward`] needs.
    pub fn forward(&self, img: &GrayImage, keep: bool) -> ForwardPass {
        match self.run(img, keep, None) {
            Ok(p) => p,
            Err(_) => unreachable!("no capture requested"),
        }
    }

    fn capture_norm_input(&self, img: &GrayImage, norm: &str) -> Map {
        match self.run(img, false, Some(norm)) {
            Err(m) => m,
            Ok(_) => panic!("norm `{norm}` not reached"),
        }
    }

    /// Backpropagates gradients of the used stage outputs into parameter gradients.
    pub fn backward(&self, pass: &ForwardPass, stage_grads: &[Map]) -> Result<WeightSet> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| ConsultError::InvalidArgument("forward pass was run without a cache".into()))?;
        let cfg = self.cfg();
        if stage_grads.len() != cfg.stages_used.len() {
            return Err(ConsultError::InvalidArgument("one gradient per used stage expected".into()));
        }
        let mut grads = self.ws.zeros_like();
        let mut carry: Option<Map> = None;
        for (si, st) in self.arch.stages.iter().enumerate().rev() {
            let sc = &cache.stages[si];
            let mut d = match cfg.stages_used.iter().position(|&s| s == st.index) {
                Some(k) => stage_grads[k].clone(),
                None => carry.take().expect("deepest stage is always used"),
            };
            if cfg.stages_used.contains(&st.index) {
                if let Some(c) = carry.take() {
                    d.add_assign(&c);
                }
            }
            if let Some(ac) = &sc.attn {
                d = attention::backward(ac, &d, self.ws, &AttnNames::new(st.index), cfg.spatial_kernel, &mut grads);
            }
            for (b, bc) in st.blocks.iter().zip(&sc.blocks).rev() {
                d = self.block_backward(b, bc, &d, &mut grads);
            }
            carry = Some(d);
        }
        let d = carry.expect("at least one stage");
        let stem = &cache.stem;
        let (pc, ph, pw) = stem.pool_in;
        let d = maxpool_backward(&d, &stem.pool_idx, pc, ph, pw);
        let d = act_backward(&stem.act_in, &d, cfg.slope());
        let d = self.norm_back("stem.norm", &stem.norm.input, &d, &mut grads);
        let w = self.ws.data(&self.arch.stem.name);
        let mut gw = vec![0.0; w.len()];
        conv2d_backward(&stem.conv, &d, w, &self.arch.stem.geom, &mut gw, None);
        add(grads.data_mut(&self.arch.stem.name), &gw);
        for (name, t) in grads.iter_mut() {
            if !is_trainable(name) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(grads)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
