use std::collections::{BTreeMap, HashMap};

use hinet_tensor::{Gradients, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{HinetError, Result};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and record them for the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Parameter groups that receive gradients in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Generator,
    Discriminator,
    Everything,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoders, decoders, fusion network and generator.
    Generator,
    Discriminator,
}

pub const DISCRIMINATOR_PREFIX: &str = "disc.";

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with(DISCRIMINATOR_PREFIX) {
        ParamGroup::Discriminator
    } else {
        ParamGroup::Generator
    }
}

impl Trainable {
    fn includes(self, group: ParamGroup) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Generator => group == ParamGroup::Generator,
            Trainable::Discriminator => group == ParamGroup::Discriminator,
        }
    }
}

/// All learnable weights (and batch-norm running statistics) of a model,
/// keyed by dotted names such as `enc1.s1.conv.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiNetParams {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl HiNetParams {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.weights
            .keys()
            .filter(|n| param_group(n) == group)
            .cloned()
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }

    /// Folds batch statistics recorded in training mode into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat]) {
        let m = self.config.bn_momentum;
        for st in stats {
            for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{}.{suffix}", st.layer)) {
                    for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
            }
        }
    }
}

/// Batch statistics of one batch-norm layer from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnStat {
    pub layer: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Copy)]
pub(crate) enum ParamInit {
    Normal,
    Zeros,
    Ones,
}

struct InitState {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
    weights: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

/// One recorded forward computation. Parameters are bound to graph leaves
/// the first time a layer asks for them.
pub struct Session {
    pub graph: Graph,
    mode: Mode,
    trainable: Trainable,
    bound: HashMap<String, Var>,
    bn_stats: Vec<BnStat>,
    init: Option<InitState>,
}

impl Session {
    pub fn new(mode: Mode, trainable: Trainable) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            trainable,
            bound: HashMap::new(),
            bn_stats: Vec::new(),
            init: None,
        }
    }

    /// A session that creates parameters on first use instead of reading them.
    pub(crate) fn initializer(config: &ModelConfig, seed: u64) -> Self {
        let mut s = Self::new(Mode::Eval, Trainable::Nothing);
        s.init = Some(InitState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, config.init_std).expect("init_std validated"),
            weights: BTreeMap::new(),
            buffers: BTreeMap::new(),
        });
        s
    }

    pub(crate) fn into_created(self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let init = self.init.expect("initializer session");
        (init.weights, init.buffers)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStat> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of every bound trainable parameter, sorted by name.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            if !self.trainable.includes(param_group(name)) {
                continue;
            }
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.graph.shape(var)));
            out.insert(name.clone(), g);
        }
        out
    }

    pub(crate) fn param(
        &mut self,
        params: &HiNetParams,
        name: &str,
        shape: &[usize],
        init: ParamInit,
    ) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            if self.graph.shape(v) != shape {
                return Err(HinetError::Structure(format!(
                    "parameter {name} requested with shape {shape:?}, bound as {:?}",
                    self.graph.shape(v)
                )));
            }
            return Ok(v);
        }
        let value = match self.init.as_mut() {
            Some(st) => {
                let n = shape.iter().product();
                let data = match init {
                    ParamInit::Normal => (0..n).map(|_| st.normal.sample(&mut st.rng)).collect(),
                    ParamInit::Zeros => vec![0.0; n],
                    ParamInit::Ones => vec![1.0; n],
                };
                let t = Tensor::new(shape, data)?;
                st.weights.insert(name.to_string(), t.clone());
                t
            }
            None => {
                let t = params.weights.get(name).ok_or_else(|| {
                    HinetError::Structure(format!("parameter {name} is missing"))
                })?;
                if t.shape() != shape {
                    return Err(HinetError::Dimension(format!(
                        "parameter {name} has shape {:?}, layer expects {shape:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
        };
        let rg = self.trainable.includes(param_group(name));
        let v = self.graph.leaf(value, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Batch norm over `x` for layer `name` (`gamma`, `beta` and running buffers).
    pub(crate) fn batch_norm(&mut self, params: &HiNetParams, name: &str, x: Var) -> Result<Var> {
        let c = self.graph.shape(x)[1];
        let gamma = self.param(params, &format!("{name}.gamma"), &[c], ParamInit::Ones)?;
        let beta = self.param(params, &format!("{name}.beta"), &[c], ParamInit::Zeros)?;
        let (mean_key, var_key) = (format!("{name}.running_mean"), format!("{name}.running_var"));
        if let Some(st) = self.init.as_mut() {
            st.buffers.insert(mean_key.clone(), Tensor::zeros(&[c]));
            st.buffers.insert(var_key.clone(), Tensor::full(&[c], 1.0));
        }
        match self.mode {
            Mode::Train => {
                let out = self.graph.batch_norm_train(x, gamma, beta)?;
                self.bn_stats.push(BnStat {
                    layer: name.to_string(),
                    mean: out.mean,
                    var: out.var_unbiased,
                });
                Ok(out.output)
            }
            Mode::Eval => {
                let lookup = |key: &str| -> Result<Vec<f32>> {
                    let t = params.buffers.get(key).ok_or_else(|| {
                        HinetError::Structure(format!("buffer {key} is missing"))
                    })?;
                    if t.shape() != [c] {
                        return Err(HinetError::Dimension(format!(
                            "buffer {key} has shape {:?}, expected [{c}]",
                            t.shape()
                        )));
                    }
                    Ok(t.data().to_vec())
                };
                let (rm, rv) = match self.init.as_ref() {
                    Some(_) => (vec![0.0; c], vec![1.0; c]),
                    None => (lookup(&mean_key)?, lookup(&var_key)?),
                };
                Ok(self.graph.batch_norm_eval(x, gamma, beta, &rm, &rv)?)
            }
        }
    }
}
