use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HinetError, Result};

/// Which fusion strategy the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Modality-specific encoders, MFB fusion network and MFB generator.
    Hybrid,
    /// Both sources stacked as channels into a single encoder.
    #[serde(alias = "early")]
    EarlyFusion,
    /// Independent encoders whose latents are concatenated once.
    #[serde(alias = "late")]
    LateFusion,
    /// Concatenation fusion in both the fusion network and the generator.
    ConcateD1,
    /// MFB fusion network, concatenation fusion in the generator.
    ConcateD2,
    /// Concatenation fusion network, MFB generator.
    ConcateD3,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::Hybrid,
        FusionVariant::EarlyFusion,
        FusionVariant::LateFusion,
        FusionVariant::ConcateD1,
        FusionVariant::ConcateD2,
        FusionVariant::ConcateD3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Hybrid => "hybrid",
            FusionVariant::EarlyFusion => "early_fusion",
            FusionVariant::LateFusion => "late_fusion",
            FusionVariant::ConcateD1 => "concate_d1",
            FusionVariant::ConcateD2 => "concate_d2",
            FusionVariant::ConcateD3 => "concate_d3",
        }
    }

    /// Block used by the layer-wise fusion network, if there is one.
    pub fn fusion_block(self) -> Option<BlockKind> {
        match self {
            FusionVariant::Hybrid | FusionVariant::ConcateD2 => Some(BlockKind::Mfb),
            FusionVariant::ConcateD1 | FusionVariant::ConcateD3 => Some(BlockKind::Concat),
            FusionVariant::EarlyFusion | FusionVariant::LateFusion => None,
        }
    }

    /// Block used for the generator's skip fusion.
    pub fn generator_block(self) -> BlockKind {
        match self {
            FusionVariant::Hybrid | FusionVariant::ConcateD3 => BlockKind::Mfb,
            _ => BlockKind::Concat,
        }
    }

    pub fn encoder_count(self) -> usize {
        if self == FusionVariant::EarlyFusion {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = HinetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => return Ok(FusionVariant::EarlyFusion),
            "late" => return Ok(FusionVariant::LateFusion),
            _ => {}
        }
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HinetError::Argument(format!("unknown fusion variant '{s}'")))
    }
}

/// How two same-shaped feature maps are merged inside a fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `[S1 + S2; S1 * S2; max(S1, S2)]`.
    Mfb,
    /// `[S1; S2]`.
    Concat,
}

impl BlockKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BlockKind::Mfb => "mfb",
            BlockKind::Concat => "cat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    /// Output channels of the encoder stage convolutions.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the decoder's upsample-conv stages.
    pub decoder_channels: Vec<usize>,
    /// `(Conv1, Conv2)` widths of the fusion-network blocks, shallow to deep.
    pub mfb_filters: Vec<(usize, usize)>,
    /// `(Conv1, Conv2)` widths of the generator blocks, deep to shallow.
    pub generator_mfb_filters: Vec<(usize, usize)>,
    pub generator_head_channels: Vec<usize>,
    /// Channels of the two convolutions after the final upsampling; the last
    /// one is the image channel count.
    pub generator_tail_channels: Vec<usize>,
    pub discriminator_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub fusion_variant: FusionVariant,
    pub init_std: f32,
    pub bn_momentum: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (128, 128),
            encoder_channels: vec![32, 64, 128],
            decoder_channels: vec![64, 32, 32],
            mfb_filters: vec![(32, 64), (64, 128), (128, 128)],
            generator_mfb_filters: vec![(128, 128), (64, 128), (32, 64)],
            generator_head_channels: vec![256, 128],
            generator_tail_channels: vec![32, 1],
            discriminator_channels: vec![32, 64, 128, 256, 1],
            leaky_slope: 0.2,
            fusion_variant: FusionVariant::Hybrid,
            init_std: 0.02,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: FusionVariant) -> Self {
        self.fusion_variant = variant;
        self
    }

    pub fn with_input_size(mut self, rows: usize, cols: usize) -> Self {
        self.input_size = (rows, cols);
        self
    }

    /// Divides every hidden width by `divisor` (image and score channels stay 1).
    pub fn scaled(mut self, divisor: usize) -> Self {
        let d = |c: usize| (c / divisor).max(1);
        self.encoder_channels.iter_mut().for_each(|c| *c = d(*c));
        self.decoder_channels.iter_mut().for_each(|c| *c = d(*c));
        for f in self.mfb_filters.iter_mut().chain(&mut self.generator_mfb_filters) {
            *f = (d(f.0), d(f.1));
        }
        self.generator_head_channels.iter_mut().for_each(|c| *c = d(*c));
        let tail = self.generator_tail_channels.len() - 1;
        self.generator_tail_channels[..tail].iter_mut().for_each(|c| *c = d(*c));
        let last = self.discriminator_channels.len() - 1;
        self.discriminator_channels[..last].iter_mut().for_each(|c| *c = d(*c));
        self
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Channels of the fused latent handed to the generator head.
    pub fn latent_channels(&self) -> usize {
        match self.fusion_variant.fusion_block() {
            Some(_) => self.mfb_filters.last().map_or(0, |f| f.1),
            None => *self.encoder_channels.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages();
        let lists = [
            ("encoder_channels", self.encoder_channels.len()),
            ("decoder_channels", self.decoder_channels.len()),
            ("generator_head_channels", self.generator_head_channels.len()),
            ("discriminator_channels", self.discriminator_channels.len()),
        ];
        for (name, len) in lists {
            if len == 0 {
                return Err(HinetError::Config(format!("{name} must be nonempty")));
            }
        }
        if self.decoder_channels.len() != stages
            || self.mfb_filters.len() != stages
            || self.generator_mfb_filters.len() != stages
        {
            return Err(HinetError::Config(format!(
                "decoder, fusion and generator block lists must all have {stages} stages"
            )));
        }
        if self.generator_tail_channels.len() != 2 {
            return Err(HinetError::Config(
                "generator_tail_channels needs exactly two entries".into(),
            ));
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.generator_head_channels)
            .chain(&self.generator_tail_channels)
            .chain(&self.discriminator_channels)
            .chain(self.mfb_filters.iter().flat_map(|f| [&f.0, &f.1]))
            .chain(self.generator_mfb_filters.iter().flat_map(|f| [&f.0, &f.1]));
        if all.into_iter().any(|&c| c == 0) {
            return Err(HinetError::Config("channel counts must be positive".into()));
        }
        // the generator runs `stages - 1` upsamplings inside its block chain
        // and one final upsampling, so it returns to the input resolution
        let factor = 1usize << stages;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(HinetError::Config(format!(
                "input size {h}x{w} must be divisible by 2^{stages}"
            )));
        }
        let strided = self.discriminator_channels.len() - 1;
        if h >> strided == 0 || w >> strided == 0 {
            return Err(HinetError::Config(format!(
                "input size {h}x{w} too small for {strided} stride-2 discriminator layers"
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.init_std > 0.0) {
            return Err(HinetError::Config("leaky_slope must be >= 0 and init_std > 0".into()));
        }
        Ok(())
    }
}
