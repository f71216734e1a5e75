//! Encoders, decoders, fusion blocks, generator and discriminator.
//!
//! Layers are built on a [`Session`] (one recorded autograd graph) through
//! [`Forward`]. The free functions here are tensor-in/tensor-out wrappers that
//! run a single evaluation-mode pass.

mod checkpoint;
mod config;
mod network;
mod session;

use std::collections::BTreeMap;

use hinet_tensor::{Tensor, Var};

pub use checkpoint::{Container, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use config::{BlockKind, FusionVariant, ModelConfig};
pub use network::{FeaturePyramid, Forward, FusionState, GeneratorOutput};
pub use session::{param_group, BnStat, HiNetParams, Mode, ParamGroup, Session, Trainable, DISCRIMINATOR_PREFIX};

use crate::error::{HinetError, Result};

/// Smallest square input that exercises every layer of `config`; parameter
/// shapes do not depend on the spatial size, so initialization runs there.
fn probe_size(config: &ModelConfig) -> usize {
    let strided = config.discriminator_channels.len().saturating_sub(1);
    1usize << config.stages().max(strided)
}

fn empty_params(config: &ModelConfig) -> HiNetParams {
    HiNetParams {
        config: config.clone(),
        weights: BTreeMap::new(),
        buffers: BTreeMap::new(),
    }
}

/// Draws a fresh parameter set: conv weights ~ N(0, init_std), biases 0,
/// batch-norm scale 1 and shift 0, running mean 0 and variance 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<HiNetParams> {
    config.validate()?;
    let side = probe_size(config);
    let probe = config.clone().with_input_size(side, side);
    let empty = empty_params(config);
    let mut session = Session::initializer(config, seed);
    {
        let mut f = Forward::with_config(&mut session, &empty, &probe);
        let z = Tensor::zeros(&[1, 1, side, side]);
        let x1 = f.session.input(z.clone());
        let x2 = f.session.input(z.clone());
        f.generator(x1, x2)?;
        let t = f.session.input(z);
        f.discriminator(x1, x2, t)?;
    }
    let (weights, buffers) = session.into_created();
    Ok(HiNetParams {
        config: config.clone(),
        weights,
        buffers,
    })
}

impl HiNetParams {
    /// Checks that names and shapes match what `config` builds.
    pub fn check_inventory(&self) -> Result<()> {
        let reference = init_params(&self.config, 0)?;
        for (kind, have, want) in [
            ("parameter", &self.weights, &reference.weights),
            ("buffer", &self.buffers, &reference.buffers),
        ] {
            if let Some(missing) = want.keys().find(|k| !have.contains_key(*k)) {
                return Err(HinetError::Structure(format!("{kind} {missing} is missing")));
            }
            if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(HinetError::Structure(format!("unexpected {kind} {extra}")));
            }
            for (k, t) in have {
                if t.shape() != want[k].shape() {
                    return Err(HinetError::Dimension(format!(
                        "{kind} {k} has shape {:?}, config expects {:?}",
                        t.shape(),
                        want[k].shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluation-mode generator pass on `[N, 1, H, W]` batches.
    pub fn synthesize(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        generator_forward(x1, x2, self)
    }
}

fn eval<T>(params: &HiNetParams, body: impl FnOnce(&mut Forward) -> Result<T>) -> Result<T> {
    let mut session = Session::new(Mode::Eval, Trainable::Nothing);
    let mut f = Forward::new(&mut session, params);
    body(&mut f)
}

fn value(f: &Forward, v: Var) -> Tensor {
    f.session.graph.value(v).clone()
}

/// Tensor copy of a [`FeaturePyramid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidTensors {
    pub pre_pool: Vec<Tensor>,
    pub pooled: Vec<Tensor>,
}

impl PyramidTensors {
    fn capture(f: &Forward, p: &FeaturePyramid) -> Self {
        Self {
            pre_pool: p.pre_pool.iter().map(|&v| value(f, v)).collect(),
            pooled: p.pooled.iter().map(|&v| value(f, v)).collect(),
        }
    }

    pub fn latent(&self) -> &Tensor {
        self.pooled.last().expect("encoder has at least one stage")
    }
}

fn encoder_prefix(params: &HiNetParams, which: usize) -> Result<&'static str> {
    let early = params.config.fusion_variant == FusionVariant::EarlyFusion;
    match (early, which) {
        (true, 0) => Ok("enc"),
        (false, 1) => Ok("enc1"),
        (false, 2) => Ok("enc2"),
        _ => Err(HinetError::Argument(format!(
            "variant {} has no encoder {which}",
            params.config.fusion_variant
        ))),
    }
}

/// Runs encoder `which` (1 or 2; 0 for the single early-fusion encoder).
pub fn encoder_forward(x: &Tensor, params: &HiNetParams, which: usize) -> Result<PyramidTensors> {
    let prefix = encoder_prefix(params, which)?;
    eval(params, |f| {
        let xv = f.session.input(x.clone());
        let p = f.encoder(prefix, xv)?;
        Ok(PyramidTensors::capture(f, &p))
    })
}

/// Runs the decoder paired with encoder `which` on a latent map.
pub fn decoder_forward(h: &Tensor, params: &HiNetParams, which: usize) -> Result<Tensor> {
    let prefix = encoder_prefix(params, which)?.replace("enc", "dec");
    let out_ch = if which == 0 { 2 } else { 1 };
    eval(params, |f| {
        let hv = f.session.input(h.clone());
        let y = f.decoder(&prefix, hv, out_ch)?;
        Ok(value(f, y))
    })
}

/// Runs the fusion network on two pyramids; returns `F_1..F_n`.
pub fn fusion_forward(p1: &PyramidTensors, p2: &PyramidTensors, params: &HiNetParams) -> Result<Vec<Tensor>> {
    let kind = params.config.fusion_variant.fusion_block().ok_or_else(|| {
        HinetError::Argument(format!("variant {} has no fusion network", params.config.fusion_variant))
    })?;
    eval(params, |f| {
        let mut wrap = |p: &PyramidTensors| FeaturePyramid {
            pre_pool: p.pre_pool.iter().map(|t| f.session.input(t.clone())).collect(),
            pooled: p.pooled.iter().map(|t| f.session.input(t.clone())).collect(),
        };
        let (a, b) = (wrap(p1), wrap(p2));
        let state = f.fusion(kind, &a, &b)?;
        Ok(state.fused.iter().map(|&v| value(f, v)).collect())
    })
}

pub fn generator_forward(x1: &Tensor, x2: &Tensor, params: &HiNetParams) -> Result<Tensor> {
    eval(params, |f| {
        let a = f.session.input(x1.clone());
        let b = f.session.input(x2.clone());
        let out = f.generator(a, b)?;
        Ok(value(f, out.y_hat))
    })
}

/// Score map of the conditional discriminator, values in (0, 1).
pub fn discriminator_forward(x1: &Tensor, x2: &Tensor, t: &Tensor, params: &HiNetParams) -> Result<Tensor> {
    eval(params, |f| {
        let a = f.session.input(x1.clone());
        let b = f.session.input(x2.clone());
        let c = f.session.input(t.clone());
        let s = f.discriminator(a, b, c)?;
        Ok(value(f, s))
    })
}

/// Shape description of a standalone fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Channels of each source.
    pub channels: usize,
    /// Channels of `F_prev`, if the block takes one.
    pub prev_channels: Option<usize>,
    pub filters: (usize, usize),
}

const BLOCK_NAME: &str = "block";

/// Initializes the parameters of one standalone fusion block.
pub fn init_block_params(spec: BlockSpec, seed: u64) -> Result<HiNetParams> {
    let config = ModelConfig::default();
    let empty = empty_params(&config);
    let mut session = Session::initializer(&config, seed);
    {
        let mut f = Forward::new(&mut session, &empty);
        let s = f.session.input(Tensor::zeros(&[1, spec.channels, 2, 2]));
        let prev = spec
            .prev_channels
            .map(|c| f.session.input(Tensor::zeros(&[1, c, 2, 2])));
        f.fusion_block(spec.kind, BLOCK_NAME, &[s, s], prev, spec.filters)?;
    }
    let (weights, buffers) = session.into_created();
    Ok(HiNetParams {
        config,
        weights,
        buffers,
    })
}

/// Evaluation-mode MFB on `S1`, `S2` and an optional resolution-aligned
/// `F_prev`, with parameters from [`init_block_params`].
pub fn mfb_forward(
    s1: &Tensor,
    s2: &Tensor,
    f_prev: Option<&Tensor>,
    params: &HiNetParams,
    filters: (usize, usize),
) -> Result<Tensor> {
    eval(params, |f| {
        let a = f.session.input(s1.clone());
        let b = f.session.input(s2.clone());
        let p = f_prev.map(|t| f.session.input(t.clone()));
        let out = f.fusion_block(BlockKind::Mfb, BLOCK_NAME, &[a, b], p, filters)?;
        Ok(value(f, out))
    })
}
