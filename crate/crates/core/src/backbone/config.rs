use serde::{Deserialize, Serialize};

use crate::embedding::{LatentShape, PatchMode, TemporalPos};
use crate::error::{Error, Result};

/// Spatio-temporal factorization of the Transformer stack. `Image` is the
/// spatial-only per-frame model that video checkpoints are adapted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    Image = 0,
    /// Alternating spatial and temporal blocks.
    Interleaved = 1,
    /// All spatial blocks, then all temporal blocks.
    LateFusion = 2,
    /// Spatial then temporal attention inside every block.
    Sequential = 3,
    /// Half the heads attend spatially, half temporally.
    SplitHead = 4,
}

impl TryFrom<u8> for Variant {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Ok(match v {
            0 => Variant::Image,
            1 => Variant::Interleaved,
            2 => Variant::LateFusion,
            3 => Variant::Sequential,
            4 => Variant::SplitHead,
            _ => return Err(format!("unknown variant {v}, expected 0..=4")),
        })
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        v as u8
    }
}

impl Variant {
    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Conditioning vector joins every attention sequence as an extra token.
    AllTokens,
    /// Scale, shift and gate regressed from the conditioning vector.
    SAdaln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Spatial,
    Temporal,
    Sequential,
    SplitHead,
}

pub const LN_EPS: f64 = 1e-6;

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_mode: PatchMode,
    pub cond_mode: CondMode,
    pub temporal_pos: TemporalPos,
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

/// Model sizes S/B/L/XL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatteSize {
    S,
    B,
    L,
    XL,
}

impl LatteSize {
    /// `(layers, hidden, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            LatteSize::S => (12, 384, 6),
            LatteSize::B => (12, 768, 12),
            LatteSize::L => (24, 1024, 16),
            LatteSize::XL => (28, 1152, 16),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" => Some(LatteSize::S),
            "b" => Some(LatteSize::B),
            "l" => Some(LatteSize::L),
            "xl" => Some(LatteSize::XL),
            _ => None,
        }
    }
}

impl ModelConfig {
    /// 16-frame, 32×32×4 latent, patch 2, unconditional S-AdaLN model.
    pub fn latte(size: LatteSize, variant: Variant) -> Self {
        let (layers, hidden, heads) = size.dims();
        Self {
            variant,
            layers,
            hidden,
            heads,
            patch_h: 2,
            patch_w: 2,
            patch_mode: PatchMode::Uniform,
            cond_mode: CondMode::SAdaln,
            temporal_pos: TemporalPos::Absolute,
            frames: 16,
            latent_height: 32,
            latent_width: 32,
            latent_channels: 4,
            num_classes: None,
            mlp_ratio: 4,
        }
    }

    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            variant: Variant::Interleaved,
            layers: 4,
            hidden: 64,
            heads: 4,
            patch_h: 2,
            patch_w: 2,
            patch_mode: PatchMode::Uniform,
            cond_mode: CondMode::SAdaln,
            temporal_pos: TemporalPos::Absolute,
            frames: 4,
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
            num_classes: None,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn stride(&self) -> usize {
        self.patch_mode.stride()
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.frames, self.latent_height, self.latent_width, self.latent_channels)
    }

    /// `(n_f, n_h, n_w)` for the configured clip length.
    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.stride(),
            self.latent_height / self.patch_h,
            self.latent_width / self.patch_w,
        )
    }

    /// Tokens per frame.
    pub fn spatial_tokens(&self) -> usize {
        let (_, nh, nw) = self.grid();
        nh * nw
    }

    /// Width of one input token before projection.
    pub fn patch_dim(&self) -> usize {
        self.stride() * self.patch_h * self.patch_w * self.latent_channels
    }

    /// Width of one decoded token: noise and variance channels per pixel.
    pub fn decode_dim(&self) -> usize {
        self.patch_h * self.patch_w * 2 * self.latent_channels
    }

    pub fn block_plan(&self) -> Vec<BlockKind> {
        let n = self.layers;
        match self.variant {
            Variant::Image => vec![BlockKind::Spatial; n],
            Variant::Interleaved => (0..n)
                .map(|i| if i % 2 == 0 { BlockKind::Spatial } else { BlockKind::Temporal })
                .collect(),
            Variant::LateFusion => (0..n)
                .map(|i| if i < n / 2 { BlockKind::Spatial } else { BlockKind::Temporal })
                .collect(),
            Variant::Sequential => vec![BlockKind::Sequential; n],
            Variant::SplitHead => vec![BlockKind::SplitHead; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("layers, hidden, heads and mlp_ratio must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(4) {
            return bad(format!("hidden {} must be divisible by 4", self.hidden));
        }
        if matches!(self.variant, Variant::Interleaved | Variant::LateFusion) && !self.layers.is_multiple_of(2) {
            return bad(format!("variant {} needs an even layer count", self.variant.id()));
        }
        if self.variant == Variant::SplitHead && !self.heads.is_multiple_of(2) {
            return bad("variant 4 needs an even head count".into());
        }
        if self.temporal_pos == TemporalPos::Rope && !self.head_dim().is_multiple_of(2) {
            return bad(format!("rope needs an even head dim, got {}", self.head_dim()));
        }
        if self.variant == Variant::Image && self.patch_mode != PatchMode::Uniform {
            return bad("the image model uses uniform patches".into());
        }
        if self.frames == 0 || self.latent_height == 0 || self.latent_width == 0 || self.latent_channels == 0 {
            return bad("latent extents must be positive".into());
        }
        if self.patch_h == 0
            || self.patch_w == 0
            || !self.latent_height.is_multiple_of(self.patch_h)
            || !self.latent_width.is_multiple_of(self.patch_w)
        {
            return bad(format!(
                "{}x{} latent not divisible by {}x{} patches",
                self.latent_height, self.latent_width, self.patch_h, self.patch_w
            ));
        }
        let s = self.stride();
        if s == 0 || !self.frames.is_multiple_of(s) {
            return bad(format!("{} frames not divisible by stride {s}", self.frames));
        }
        if self.num_classes == Some(0) {
            return bad("num_classes must be positive when given".into());
        }
        Ok(())
    }
}
