use hinet_tensor::Var;

use super::session::{HiNetParams, ParamInit, Session};
use super::{BlockKind, FusionVariant, ModelConfig};
use crate::error::{HinetError, Result};

#[derive(Clone, Copy)]
enum Act {
    Relu,
    Leaky(f32),
}

/// Per-stage activations of one encoder.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Activation of stage `k` before pooling.
    pub pre_pool: Vec<Var>,
    /// Activation of stage `k` after 2x2 max-pooling.
    pub pooled: Vec<Var>,
}

impl FeaturePyramid {
    /// Final encoder output `h`.
    pub fn latent(&self) -> Var {
        *self.pooled.last().expect("encoder has at least one stage")
    }
}

/// Outputs of the fusion-network blocks, shallow to deep.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub fused: Vec<Var>,
}

impl FusionState {
    /// Fused latent handed to the generator.
    pub fn latent(&self) -> Var {
        *self.fused.last().expect("fusion network has at least one block")
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub y_hat: Var,
    /// `(input, reconstruction)` per modality-specific autoencoder.
    pub reconstructions: Vec<(Var, Var)>,
    pub pyramids: Vec<FeaturePyramid>,
    pub fusion: Option<FusionState>,
    /// Representation the generator head consumes.
    pub latent: Var,
}

/// A session paired with the parameters it reads, for the duration of one
/// forward computation.
pub struct Forward<'a> {
    pub session: &'a mut Session,
    pub params: &'a HiNetParams,
    pub config: &'a ModelConfig,
}

impl<'a> Forward<'a> {
    pub fn new(session: &'a mut Session, params: &'a HiNetParams) -> Self {
        Self {
            session,
            params,
            config: &params.config,
        }
    }

    pub(crate) fn with_config(
        session: &'a mut Session,
        params: &'a HiNetParams,
        config: &'a ModelConfig,
    ) -> Self {
        Self {
            session,
            params,
            config,
        }
    }

    fn channels(&self, x: Var) -> usize {
        self.session.graph.shape(x)[1]
    }

    fn conv(&mut self, name: &str, x: Var, out: usize, stride: usize, bias: bool) -> Result<Var> {
        let c = self.channels(x);
        let w = self.session.param(
            self.params,
            &format!("{name}.weight"),
            &[out, c, 3, 3],
            ParamInit::Normal,
        )?;
        let b = if bias {
            Some(self.session.param(self.params, &format!("{name}.bias"), &[out], ParamInit::Zeros)?)
        } else {
            None
        };
        Ok(self.session.graph.conv2d(x, w, b, stride, 1)?)
    }

    /// Conv3x3 (no bias) -> batch norm -> activation.
    fn conv_bn_act(&mut self, name: &str, x: Var, out: usize, stride: usize, act: Act) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, out, stride, false)?;
        let y = self.session.batch_norm(self.params, &format!("{name}.bn"), y)?;
        Ok(match act {
            Act::Relu => self.session.graph.relu(y),
            Act::Leaky(s) => self.session.graph.leaky_relu(y, s),
        })
    }

    fn check_image(&self, x: Var, channels: usize) -> Result<()> {
        let shape = self.session.graph.shape(x);
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != channels || shape[2] != h || shape[3] != w {
            return Err(HinetError::Dimension(format!(
                "expected [N, {channels}, {h}, {w}] input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Modality-specific encoder: per stage Conv3x3 -> BN -> LeakyReLU -> max-pool.
    pub fn encoder(&mut self, prefix: &str, x: Var) -> Result<FeaturePyramid> {
        let mut pre_pool = Vec::new();
        let mut pooled = Vec::new();
        let mut h = x;
        let slope = self.config.leaky_slope;
        for (k, &ch) in self.config.encoder_channels.clone().iter().enumerate() {
            let a = self.conv_bn_act(&format!("{prefix}.s{}", k + 1), h, ch, 1, Act::Leaky(slope))?;
            pre_pool.push(a);
            h = self.session.graph.max_pool2(a)?;
            pooled.push(h);
        }
        Ok(FeaturePyramid { pre_pool, pooled })
    }

    /// Mirrored decoder: per stage upsample -> Conv3x3 -> BN -> ReLU, then a
    /// biased conv to `out_channels` and tanh.
    pub fn decoder(&mut self, prefix: &str, h: Var, out_channels: usize) -> Result<Var> {
        let expected = self.config.input_size.0 >> self.config.stages();
        if self.session.graph.shape(h).get(2) != Some(&expected) {
            return Err(HinetError::Dimension(format!(
                "decoder expects a latent of side {expected}, got {:?}",
                self.session.graph.shape(h)
            )));
        }
        let mut x = h;
        for (k, &ch) in self.config.decoder_channels.clone().iter().enumerate() {
            let up = self.session.graph.upsample2(x)?;
            x = self.conv_bn_act(&format!("{prefix}.up{}", k + 1), up, ch, 1, Act::Relu)?;
        }
        let out = self.conv(&format!("{prefix}.out"), x, out_channels, 1, true)?;
        Ok(self.session.graph.tanh(out))
    }

    /// Fusion block. For [`BlockKind::Mfb`] the two sources are merged as
    /// `[S1 + S2; S1 * S2; max(S1, S2)]`; for [`BlockKind::Concat`] they are
    /// stacked as they are. Conv1 weights the merged features, its output is
    /// concatenated with `f_prev` when present, and Conv2 produces `F_n`.
    pub fn fusion_block(
        &mut self,
        kind: BlockKind,
        name: &str,
        sources: &[Var],
        f_prev: Option<Var>,
        filters: (usize, usize),
    ) -> Result<Var> {
        let g = &mut self.session.graph;
        let mixed = match kind {
            BlockKind::Mfb => {
                let [s1, s2] = sources else {
                    return Err(HinetError::Structure(format!(
                        "MFB needs exactly two inputs, got {}",
                        sources.len()
                    )));
                };
                if g.shape(*s1) != g.shape(*s2) {
                    return Err(HinetError::Dimension(format!(
                        "MFB inputs differ: {:?} vs {:?}",
                        g.shape(*s1),
                        g.shape(*s2)
                    )));
                }
                let sum = g.add(*s1, *s2)?;
                let prod = g.mul(*s1, *s2)?;
                let max = g.maximum(*s1, *s2)?;
                g.concat_channels(&[sum, prod, max])?
            }
            BlockKind::Concat => g.concat_channels(sources)?,
        };
        let a = self.conv_bn_act(&format!("{name}.conv1"), mixed, filters.0, 1, Act::Relu)?;
        let b = match f_prev {
            Some(p) => self.session.graph.concat_channels(&[a, p])?,
            None => a,
        };
        self.conv_bn_act(&format!("{name}.conv2"), b, filters.1, 1, Act::Relu)
    }

    /// Layer-wise fusion network over the pooled features of two encoders.
    /// Each block's previous output is max-pooled to the next resolution.
    pub fn fusion(&mut self, kind: BlockKind, p1: &FeaturePyramid, p2: &FeaturePyramid) -> Result<FusionState> {
        let stages = self.config.stages();
        if p1.pooled.len() != stages || p2.pooled.len() != stages {
            return Err(HinetError::Structure(format!(
                "fusion needs {stages}-stage pyramids, got {} and {}",
                p1.pooled.len(),
                p2.pooled.len()
            )));
        }
        let mut fused: Vec<Var> = Vec::with_capacity(stages);
        for k in 0..stages {
            let prev = match fused.last() {
                Some(&f) => Some(self.session.graph.max_pool2(f)?),
                None => None,
            };
            let filters = self.config.mfb_filters[k];
            let f = self.fusion_block(
                kind,
                &format!("fusion.{}{}", kind.prefix(), k + 1),
                &[p1.pooled[k], p2.pooled[k]],
                prev,
                filters,
            )?;
            fused.push(f);
        }
        Ok(FusionState { fused })
    }

    /// Full generator `G(x1, x2)` for the configured fusion variant.
    pub fn generator(&mut self, x1: Var, x2: Var) -> Result<GeneratorOutput> {
        self.check_image(x1, 1)?;
        self.check_image(x2, 1)?;
        let variant = self.config.fusion_variant;
        let mut reconstructions = Vec::new();
        let mut pyramids = Vec::new();
        if variant == FusionVariant::EarlyFusion {
            let stacked = self.session.graph.concat_channels(&[x1, x2])?;
            let p = self.encoder("enc", stacked)?;
            let rec = self.decoder("dec", p.latent(), 2)?;
            reconstructions.push((stacked, rec));
            pyramids.push(p);
        } else {
            for (i, x) in [x1, x2].into_iter().enumerate() {
                let p = self.encoder(&format!("enc{}", i + 1), x)?;
                let rec = self.decoder(&format!("dec{}", i + 1), p.latent(), 1)?;
                reconstructions.push((x, rec));
                pyramids.push(p);
            }
        }

        let (latent, fusion) = match variant.fusion_block() {
            Some(kind) => {
                let state = self.fusion(kind, &pyramids[0], &pyramids[1])?;
                (state.latent(), Some(state))
            }
            None if variant == FusionVariant::LateFusion => {
                let cat = self
                    .session
                    .graph
                    .concat_channels(&[pyramids[0].latent(), pyramids[1].latent()])?;
                let ch = *self.config.encoder_channels.last().unwrap();
                (self.conv_bn_act("late.fuse", cat, ch, 1, Act::Relu)?, None)
            }
            None => (pyramids[0].latent(), None),
        };

        let mut x = latent;
        for (i, &ch) in self.config.generator_head_channels.clone().iter().enumerate() {
            x = self.conv_bn_act(&format!("gen.head{}", i + 1), x, ch, 1, Act::Relu)?;
        }

        let kind = variant.generator_block();
        let stages = self.config.stages();
        for (j, k) in (0..stages).rev().enumerate() {
            let f_prev = if j == 0 {
                x
            } else {
                self.session.graph.upsample2(x)?
            };
            let sources: Vec<Var> = pyramids.iter().map(|p| p.pooled[k]).collect();
            let filters = self.config.generator_mfb_filters[j];
            x = self.fusion_block(
                kind,
                &format!("gen.{}{}", kind.prefix(), k + 1),
                &sources,
                Some(f_prev),
                filters,
            )?;
        }

        let up = self.session.graph.upsample2(x)?;
        let tail = self.config.generator_tail_channels.clone();
        let t = self.conv_bn_act("gen.tail1", up, tail[0], 1, Act::Relu)?;
        let out = self.conv("gen.tail2", t, tail[1], 1, true)?;
        let y_hat = self.session.graph.tanh(out);
        Ok(GeneratorOutput {
            y_hat,
            reconstructions,
            pyramids,
            fusion,
            latent,
        })
    }

    /// Conditional discriminator on `(x1, x2, t)`; returns a sigmoid score map.
    pub fn discriminator(&mut self, x1: Var, x2: Var, t: Var) -> Result<Var> {
        for v in [x1, x2, t] {
            self.check_image(v, 1)?;
        }
        let mut x = self.session.graph.concat_channels(&[x1, x2, t])?;
        let chans = self.config.discriminator_channels.clone();
        let slope = self.config.leaky_slope;
        let (last, hidden) = chans.split_last().expect("validated nonempty");
        for (i, &ch) in hidden.iter().enumerate() {
            x = self.conv_bn_act(&format!("disc.l{}", i + 1), x, ch, 2, Act::Leaky(slope))?;
        }
        let logits = self.conv(&format!("disc.l{}", chans.len()), x, *last, 1, true)?;
        Ok(self.session.graph.sigmoid(logits))
    }
}
