//! Attention-augmented residual feature extractor.

mod aggregate;
mod attention;
mod config;
mod network;

pub use aggregate::{aggregate_backward, aggregate_layers, aggregate_with_shape, AggregateShape, PatchFeatureGrid};
pub use config::{is_trainable, Activation, BlockKind, ExtractorConfig};
pub use network::{Architecture, AttentionState, ForwardPass, Network, StageAttention};

use crate::error::{ConsultError, Result};
use crate::image::GrayImage;
use crate::nn::{Map, WeightSet};
use crate::raster::resize_bilinear;

/// Runs the trunk and returns the used stage maps with the captured gates.
pub fn extract_features(img: &GrayImage, cfg: &ExtractorConfig, ws: &WeightSet) -> Result<(Vec<Map>, AttentionState)> {
    let arch = Architecture::new(cfg)?;
    let net = Network::new(&arch, ws)?;
    let pass = net.forward(img, false);
    Ok((pass.stage_maps, pass.attention))
}

/// Feature extraction followed by aggregation.
pub fn extract_grid(img: &GrayImage, cfg: &ExtractorConfig, ws: &WeightSet) -> Result<PatchFeatureGrid> {
    Extractor::new(cfg, ws)?.grid(img)
}

/// Starting weights: seeded He-normal convolutions whose frozen norm
/// statistics are calibrated on `calibration` when `cfg.pretrained` is set.
pub fn initial_weights(cfg: &ExtractorConfig, seed: u64, calibration: &[GrayImage]) -> Result<WeightSet> {
    let arch = Architecture::new(cfg)?;
    let mut ws = arch.init_weights(seed);
    if cfg.pretrained {
        arch.calibrate_norms(&mut ws, calibration)?;
        ws.metadata.insert("init".into(), format!("seeded-calibrated:{seed}"));
    }
    Ok(ws)
}

/// Channel-mean activation of `stage`, min-max normalised and upscaled to the
/// input size. Returns `(height, width, values)`.
pub fn attention_heatmap(state: &AttentionState, stage: usize) -> Result<(usize, usize, Vec<f64>)> {
    let st = state
        .stages
        .iter()
        .find(|s| s.stage == stage)
        .ok_or_else(|| ConsultError::InvalidArgument(format!("stage {stage} was not captured")))?;
    let lo = st.activation_mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = st.activation_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        st.activation_mean.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; st.activation_mean.len()]
    };
    let (h, w) = state.input_size;
    let mut up = resize_bilinear(&norm, st.height, st.width, h, w);
    up.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((h, w, up))
}

/// Architecture plus validated weights, ready for repeated extraction.
pub struct Extractor<'a> {
    arch: Architecture,
    ws: &'a WeightSet,
}

impl<'a> Extractor<'a> {
    pub fn new(cfg: &ExtractorConfig, ws: &'a WeightSet) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        arch.validate_weights(ws)?;
        Ok(Self { arch, ws })
    }

    pub fn config(&self) -> &ExtractorConfig {
        self.arch.config()
    }

    pub fn network(&self) -> Network<'_> {
        Network {
            arch: &self.arch,
            ws: self.ws,
        }
    }

    pub fn grid(&self, img: &GrayImage) -> Result<PatchFeatureGrid> {
        self.grid_with_state(img).map(|(g, _)| g)
    }

    pub fn grid_with_state(&self, img: &GrayImage) -> Result<(PatchFeatureGrid, AttentionState)> {
        let pass = self.network().forward(img, false);
        let (grid, _) =
            aggregate_with_shape(&pass.stage_maps, self.config().patch_neighborhood, img.height())?;
        if !grid.is_finite() {
            return Err(ConsultError::Numerical("non-finite patch features".into()));
        }
        Ok((grid, pass.attention))
    }

    pub fn grids(&self, imgs: &[GrayImage]) -> Result<Vec<PatchFeatureGrid>> {
        crate::par::par_map!(imgs, |img| self.grid(img)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(width: usize) -> ExtractorConfig {
        ExtractorConfig {
            base_width: width,
            pretrained: false,
            ..ExtractorConfig::default()
        }
    }

    fn texture(h: usize, w: usize, k: f64) -> GrayImage {
        GrayImage::from_fn_clamped(w, h, |y, x| {
            128.0 + 90.0 * ((x as f64 * k).sin() * (y as f64 * 0.7 * k).cos())
        })
        .unwrap()
    }

    #[test]
    fn standard_stage_shapes() {
        let c = ExtractorConfig {
            pretrained: false,
            ..ExtractorConfig::default()
        };
        let ws = initial_weights(&c, 1, &[]).unwrap();
        let (maps, _) = extract_features(&texture(256, 256, 0.1), &c, &ws).unwrap();
        let shapes: Vec<_> = maps.iter().map(|m| (m.c, m.h, m.w)).collect();
        assert_eq!(shapes, vec![(64, 64, 64), (128, 32, 32), (256, 16, 16)]);
        let g = aggregate_layers(&maps, 3).unwrap();
        assert_eq!((g.height, g.width, g.dim), (64, 64, 448));
    }

    #[test]
    fn half_gates_quarter_first_stage() {
        let c = cfg(8);
        let img = texture(64, 64, 0.2);
        let ws = initial_weights(&c, 3, std::slice::from_ref(&img)).unwrap();
        let plain_cfg = ExtractorConfig {
            use_attention: false,
            ..c.clone()
        };
        let mut plain_ws = WeightSet::new();
        for (n, t) in ws.iter() {
            if !n.starts_with("attn") {
                plain_ws.insert(n.clone(), t.clone());
            }
        }
        let (a, state) = extract_features(&img, &c, &ws).unwrap();
        let (p, _) = extract_features(&img, &plain_cfg, &plain_ws).unwrap();
        for (x, y) in a[0].data.iter().zip(&p[0].data) {
            assert!((x - 0.25 * y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        for s in &state.stages {
            assert!(s.channel_gate.as_ref().unwrap().iter().all(|&g| g == 0.5));
            assert!(s.spatial_gate.as_ref().unwrap().iter().all(|&g| g == 0.5));
        }
    }

    #[test]
    fn attention_off_matches_plain_trunk() {
        let c = ExtractorConfig {
            use_attention: false,
            activation: Activation::Relu,
            ..cfg(8)
        };
        let ws = initial_weights(&c, 9, &[]).unwrap();
        let img = texture(64, 64, 0.3);
        let (a, state) = extract_features(&img, &c, &ws).unwrap();
        let (b, _) = extract_features(&img, &c, &ws).unwrap();
        assert_eq!(a, b);
        assert!(state.stages.iter().all(|s| s.channel_gate.is_none()));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let with = cfg(8);
        let without = ExtractorConfig {
            use_attention: false,
            ..with.clone()
        };
        let ws = initial_weights(&without, 1, &[]).unwrap();
        let err = extract_features(&texture(64, 64, 0.1), &with, &ws).unwrap_err();
        assert!(matches!(err, ConsultError::Config(_)));
    }

    #[test]
    fn heatmap_rejects_unused_stage_and_normalises() {
        let c = cfg(8);
        let img = texture(64, 64, 0.25);
        let ws = initial_weights(&c, 2, std::slice::from_ref(&img)).unwrap();
        let (_, state) = extract_features(&img, &c, &ws).unwrap();
        assert!(attention_heatmap(&state, 4).is_err());
        let (h, w, map) = attention_heatmap(&state, 1).unwrap();
        assert_eq!((h, w, map.len()), (64, 64, 64 * 64));
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_activation_maps_to_zero() {
        let state = AttentionState {
            input_size: (32, 32),
            stages: vec![StageAttention {
                stage: 1,
                height: 4,
                width: 4,
                channel_gate: None,
                spatial_gate: None,
                activation_mean: vec![3.0; 16],
            }],
        };
        let (_, _, m) = attention_heatmap(&state, 1).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibration_tames_activations() {
        let c = ExtractorConfig {
            pretrained: true,
            ..cfg(8)
        };
        let imgs = [texture(64, 64, 0.2), texture(64, 64, 0.05)];
        let ws = initial_weights(&c, 4, &imgs).unwrap();
        assert!(ws.metadata["init"].starts_with("seeded-calibrated"));
        let (maps, _) = extract_features(&imgs[0], &c, &ws).unwrap();
        for m in &maps {
            assert!(m.is_finite());
            let rms = (m.data.iter().map(|v| v * v).sum::<f64>() / m.data.len() as f64).sqrt();
            assert!(rms > 1e-3 && rms < 50.0, "rms {rms}");
        }
    }

    /// Central differences on a scalar probe of the aggregated grid.
    #[test]
    fn gradients_match_finite_differences() {
        for (depth, act) in [(18, Activation::LeakyRelu), (50, Activation::Relu)] {
            let c = ExtractorConfig {
                backbone_depth: depth,
                base_width: 4,
                activation: act,
                stages_used: vec![1, 2],
                attention_reduction: 2,
                spatial_kernel: 3,
                ..cfg(4)
            };
            let img = texture(64, 64, 0.37);
            let mut ws = initial_weights(&c, 11, &[]).unwrap();
            // Non-trivial attention so its gradients are exercised.
            for (n, t) in ws.iter_mut() {
                if n.starts_with("attn") || n.ends_with(".beta") {
                    for (i, v) in t.data.iter_mut().enumerate() {
                        *v += 0.1 * ((i as f64 * 1.7 + n.len() as f64).sin());
                    }
                }
            }
            let arch = Architecture::new(&c).unwrap();
            let probe = |g: &PatchFeatureGrid| -> Vec<f64> {
                (0..g.data.len()).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect()
            };
            let objective = |ws: &WeightSet| {
                let net = Network { arch: &arch, ws };
                let pass = net.forward(&img, false);
                let g = aggregate_layers(&pass.stage_maps, 3).unwrap();
                g.data.iter().zip(probe(&g)).map(|(a, b)| a * b).sum::<f64>()
            };
            let net = Network { arch: &arch, ws: &ws };
            let pass = net.forward(&img, true);
            let (g, shape) = aggregate_with_shape(&pass.stage_maps, 3, 64).unwrap();
            let stage_grads = aggregate_backward(&probe(&g), &shape);
            let grads = net.backward(&pass, &stage_grads).unwrap();
            let names = [
                "stem.conv.weight",
                "stem.norm.gamma",
                "stage1.block0.conv1.weight",
                "stage2.block0.down.conv.weight",
                "stage2.block1.norm2.beta",
                "attn1.fc1.weight",
                "attn1.fc2.bias",
                "attn2.spatial.weight",
                "attn2.spatial.bias",
            ];
            for name in names {
                let n = ws.data(name).len();
                for idx in [0, n / 2, n - 1] {
                    let h = 1e-5;
                    let mut plus = ws.clone();
                    plus.data_mut(name)[idx] += h;
                    let mut minus = ws.clone();
                    minus.data_mut(name)[idx] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let an = grads.data(name)[idx];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-2),
                        "depth {depth} {name}[{idx}]: fd {fd} vs analytic {an}"
                    );
                }
            }
            assert!(grads.data("stem.norm.mean").iter().all(|&v| v == 0.0));
        }
    }
}
