use serde::{Deserialize, Serialize};

use crate::error::{ConsultError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// 18 (basic blocks) or 50 (bottleneck blocks).
    pub backbone_depth: u32,
    /// Channel width of the stem and first stage; 64 is the standard trunk.
    pub base_width: usize,
    pub use_attention: bool,
    pub activation: Activation,
    pub leaky_slope: f64,
    /// 1-based residual stages whose outputs form the patch features.
    pub stages_used: Vec<usize>,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    pub patch_neighborhood: usize,
    pub pretrained: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backbone_depth: 18,
            base_width: 64,
            use_attention: true,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.01,
            stages_used: vec![1, 2, 3],
            attention_reduction: 16,
            spatial_kernel: 7,
            patch_neighborhood: 3,
            pretrained: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConsultError::Config(m));
        if !matches!(self.backbone_depth, 18 | 50) {
            return bad(format!("backbone_depth must be 18 or 50, got {}", self.backbone_depth));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.stages_used.is_empty() {
            return bad("stages_used is empty".into());
        }
        if !self.stages_used.windows(2).all(|p| p[0] < p[1]) {
            return bad(format!("stages_used must be strictly ascending: {:?}", self.stages_used));
        }
        if self.stages_used.iter().any(|s| !(1..=4).contains(s)) {
            return bad(format!("stages_used must lie in 1..=4: {:?}", self.stages_used));
        }
        if self.spatial_kernel % 2 == 0 {
            return bad(format!("spatial_kernel must be odd, got {}", self.spatial_kernel));
        }
        if self.patch_neighborhood == 0 || self.patch_neighborhood % 2 == 0 {
            return bad(format!("patch_neighborhood must be odd, got {}", self.patch_neighborhood));
        }
        if self.attention_reduction == 0 {
            return bad("attention_reduction must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Negative-side slope of the trunk activation.
    pub fn slope(&self) -> f64 {
        match self.activation {
            Activation::Relu => 0.0,
            Activation::LeakyRelu => self.leaky_slope,
        }
    }

    pub fn block_kind(&self) -> BlockKind {
        if self.backbone_depth == 50 {
            BlockKind::Bottleneck
        } else {
            BlockKind::Basic
        }
    }

    pub fn blocks_per_stage(&self) -> [usize; 4] {
        match self.block_kind() {
            BlockKind::Basic => [2, 2, 2, 2],
            BlockKind::Bottleneck => [3, 4, 6, 3],
        }
    }

    /// Inner width of stage `s` (1-based).
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    /// Output channels of stage `s` (1-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        match self.block_kind() {
            BlockKind::Basic => self.stage_width(s),
            BlockKind::Bottleneck => 4 * self.stage_width(s),
        }
    }

    pub fn deepest_stage(&self) -> usize {
        *self.stages_used.iter().max().unwrap_or(&1)
    }

    pub fn attention_hidden(&self, channels: usize) -> usize {
        (channels / self.attention_reduction).max(1)
    }

    /// Feature dimension of the aggregated patch grid.
    pub fn feature_dim(&self) -> usize {
        self.stages_used.iter().map(|&s| self.stage_channels(s)).sum()
    }

    /// Spatial size of stage `s` for an `h x w` input.
    pub fn stage_size(&self, s: usize, h: usize, w: usize) -> (usize, usize) {
        let conv = |n: usize, k: usize, st: usize, p: usize| (n + 2 * p - k) / st + 1;
        let (mut h, mut w) = (conv(h, 7, 2, 3), conv(w, 7, 2, 3));
        h = conv(h, 3, 2, 1);
        w = conv(w, 3, 2, 1);
        for _ in 1..s {
            h = conv(h, 3, 2, 1);
            w = conv(w, 3, 2, 1);
        }
        (h, w)
    }
}

/// Norm buffers are fixed statistics and never receive updates.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".mean") || name.ends_with(".var"))
}
