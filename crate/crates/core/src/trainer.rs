//! Alternating discriminator / generator optimization with checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hinet_tensor::{Adam, AdamConfig, AdamSlot, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image2D, Modality, Sample};
use crate::error::{HinetError, Result};
use crate::model::{param_group, Container, Forward, HiNetParams, Mode, ParamGroup, Session, Trainable};
use crate::objectives::{
    discriminator_objective_var, generator_objective_var, reconstruction_loss_var, AdversarialForm, LossReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Last epoch trained at `base_lr`; the rate then falls linearly to 0.
    pub decay_start_epoch: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub strict_paper_adv: bool,
    /// Save `ckpt_epoch_<k>` every this many epochs (0: final epoch only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            base_lr: 2e-4,
            decay_start_epoch: 100,
            lambda1: 100.0,
            lambda2: 20.0,
            batch_size: 4,
            seed: 0,
            beta1: 0.5,
            beta2: 0.999,
            strict_paper_adv: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HinetError::Config(m));
        if self.epochs == 0 || self.epochs < self.decay_start_epoch {
            return bad(format!(
                "need epochs >= decay_start_epoch and epochs > 0, got {} and {}",
                self.epochs, self.decay_start_epoch
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adversarial_form(&self) -> AdversarialForm {
        AdversarialForm::from_strict(self.strict_paper_adv)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Learning rate for 1-based `epoch`: constant up to `decay_start_epoch`,
/// then linear decay reaching 0 at the final epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > config.epochs {
        return Err(HinetError::Argument(format!(
            "epoch {epoch} outside 1..={}",
            config.epochs
        )));
    }
    if epoch <= config.decay_start_epoch {
        return Ok(config.base_lr);
    }
    let remaining = (config.epochs - epoch) as f64;
    let span = (config.epochs - config.decay_start_epoch) as f64;
    Ok(config.base_lr * remaining / span)
}

/// One row of the training loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub l_recon: f64,
    pub l_g_adv: f64,
    pub l_g_l1: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub lr: f64,
}

impl LogRow {
    fn new(epoch: usize, lr: f64, r: &LossReport) -> Self {
        Self {
            epoch,
            step: r.step,
            l_recon: r.l_recon,
            l_g_adv: r.l_g_adv,
            l_g_l1: r.l_g_l1,
            l_g: r.l_g,
            l_d: r.l_d,
            lr,
        }
    }
}

pub const LOSS_LOG: &str = "loss_log.csv";

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HinetError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HinetError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| HinetError::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HinetError::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| HinetError::format("loss log", e.to_string())))
        .collect()
}

/// `[N, 1, H, W]` batch from equally sized images.
pub fn stack_images(images: &[&Image2D]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| HinetError::Argument("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(HinetError::Dimension(format!(
                "batch mixes {h}x{w} and {:?} images",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

/// Image `index` of a `[N, 1, H, W]` batch.
pub fn unstack_image(t: &Tensor, index: usize, modality: Modality) -> Result<Image2D> {
    let (_, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(HinetError::Dimension(format!("expected one channel, got {c}")));
    }
    let item = t.batch_item(index)?;
    Image2D::new(h, w, item.into_data(), modality)
}

/// Losses and per-parameter gradient norms of one step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub report: LossReport,
    pub grad_norms: BTreeMap<String, f64>,
}

fn snapshot(params: &HiNetParams, group: ParamGroup) -> Vec<Tensor> {
    params
        .weights
        .iter()
        .filter(|(k, _)| param_group(k) == group)
        .map(|(_, t)| t.clone())
        .collect()
}

fn ensure_untouched(params: &HiNetParams, group: ParamGroup, before: &[Tensor], phase: &str) -> Result<()> {
    if snapshot(params, group) != before {
        return Err(HinetError::Structure(format!(
            "{phase} update modified {group:?} parameters"
        )));
    }
    Ok(())
}

fn non_finite(report: &LossReport) -> HinetError {
    HinetError::Numeric(format!(
        "non-finite loss at step {}: {}\n{}",
        report.step,
        LossReport::CSV_HEADER,
        report.csv_row()
    ))
}

/// Model, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub params: HiNetParams,
    pub config: TrainConfig,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(params: HiNetParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = config.adam();
        Ok(Self {
            params,
            config,
            opt_g: Adam::new(adam),
            opt_d: Adam::new(adam),
            epoch: 0,
            step: 0,
        })
    }

    /// One discriminator update on (real, detached fake), then one update of
    /// the encoders, decoders, fusion network and generator.
    pub fn train_step(&mut self, batch: &[&Sample], lr: f64) -> Result<StepResult> {
        if batch.is_empty() {
            return Err(HinetError::Argument("empty training batch".into()));
        }
        let lr = lr as f32;
        let x1 = stack_images(&batch.iter().map(|s| &s.x1).collect::<Vec<_>>())?;
        let x2 = stack_images(&batch.iter().map(|s| &s.x2).collect::<Vec<_>>())?;
        let y = stack_images(&batch.iter().map(|s| &s.y).collect::<Vec<_>>())?;
        let form = self.config.adversarial_form();
        let mut report = LossReport {
            step: self.step + 1,
            ..LossReport::default()
        };
        let mut grad_norms = BTreeMap::new();

        let mut gs = Session::new(Mode::Train, Trainable::Generator);
        let (gx1, gx2, gy, out) = {
            let mut f = Forward::new(&mut gs, &self.params);
            let (a, b, t) = (f.session.input(x1.clone()), f.session.input(x2.clone()), f.session.input(y.clone()));
            let out = f.generator(a, b)?;
            (a, b, t, out)
        };
        let fake = gs.graph.value(out.y_hat).clone();

        // discriminator half-step
        let mut ds = Session::new(Mode::Train, Trainable::Discriminator);
        let l_d = {
            let mut f = Forward::new(&mut ds, &self.params);
            let (a, b) = (f.session.input(x1), f.session.input(x2));
            let (real, fake) = (f.session.input(y), f.session.input(fake));
            let d_real = f.discriminator(a, b, real)?;
            let d_fake = f.discriminator(a, b, fake)?;
            discriminator_objective_var(&mut ds.graph, d_real, d_fake)?
        };
        report.l_d = f64::from(ds.graph.value(l_d).item());
        if !report.l_d.is_finite() {
            return Err(non_finite(&report));
        }
        let grads = ds.named_grads(&ds.graph.backward(l_d)?);
        let frozen = snapshot(&self.params, ParamGroup::Generator);
        self.opt_d
            .update(&mut self.params.weights, grads.iter().map(|(k, v)| (k.as_str(), v)), lr)?;
        ensure_untouched(&self.params, ParamGroup::Generator, &frozen, "discriminator")?;
        grad_norms.extend(grads.iter().map(|(k, g)| (k.clone(), g.norm())));
        let d_stats = ds.take_bn_stats();

        // generator half-step against the updated discriminator
        let d_fake = Forward::new(&mut gs, &self.params).discriminator(gx1, gx2, out.y_hat)?;
        let g = &mut gs.graph;
        let terms = generator_objective_var(g, d_fake, out.y_hat, gy, self.config.lambda1, form)?;
        let recon = reconstruction_loss_var(g, &out.reconstructions)?;
        let weighted = g.affine(recon, self.config.lambda2, 0.0);
        let total = g.add(terms.total, weighted)?;
        let value = |v| f64::from(g.value(v).item());
        report.l_recon = value(recon);
        report.l_g_adv = value(terms.adv);
        report.l_g_l1 = value(terms.l1);
        report.l_g = value(terms.total);
        report.total = value(total);
        if !report.all_finite() {
            return Err(non_finite(&report));
        }
        let grads = gs.named_grads(&gs.graph.backward(total)?);
        let frozen = snapshot(&self.params, ParamGroup::Discriminator);
        self.opt_g
            .update(&mut self.params.weights, grads.iter().map(|(k, v)| (k.as_str(), v)), lr)?;
        ensure_untouched(&self.params, ParamGroup::Discriminator, &frozen, "generator")?;
        grad_norms.extend(grads.iter().map(|(k, g)| (k.clone(), g.norm())));

        let g_stats: Vec<_> = gs
            .take_bn_stats()
            .into_iter()
            .filter(|s| param_group(&s.layer) == ParamGroup::Generator)
            .collect();
        self.params.apply_bn_stats(&g_stats);
        self.params.apply_bn_stats(&d_stats);
        self.step += 1;
        debug!("step {} {}", report.step, report.csv_row());
        Ok(StepResult { report, grad_norms })
    }

    /// Sample order for 1-based `epoch`; derived from the seed alone so a
    /// resumed run sees the same batches.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<Vec<LogRow>> {
        let epoch = self.epoch + 1;
        let lr = lr_schedule(epoch, &self.config)?;
        let order = self.epoch_order(epoch, samples.len());
        let mut rows = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = self.train_step(&batch, lr)?;
            rows.push(LogRow::new(epoch, lr, &r.report));
        }
        self.epoch = epoch;
        Ok(rows)
    }

    /// Trains the remaining epochs. With a `run_dir`, the loss log is kept in
    /// `loss_log.csv` (rewritten after every epoch, so a failure leaves the
    /// rows so far) and checkpoints go to `ckpt_epoch_<k>`.
    pub fn fit(&mut self, samples: &[Sample], run_dir: Option<&Path>) -> Result<Vec<LogRow>> {
        if samples.is_empty() {
            return Err(HinetError::Argument("no training samples".into()));
        }
        let mut rows = Vec::new();
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir).map_err(|e| HinetError::io(dir, e))?;
            let log = dir.join(LOSS_LOG);
            if self.epoch > 0 && log.exists() {
                rows = read_loss_log(&log)?;
                rows.retain(|r| r.epoch <= self.epoch);
            }
        }
        while self.epoch < self.config.epochs {
            let new_rows = self.run_epoch(samples)?;
            let last = new_rows.last().expect("at least one batch");
            info!(
                "epoch {}/{} lr {:.3e} l_g {:.4} l_d {:.4} l_recon {:.4}",
                self.epoch, self.config.epochs, last.lr, last.l_g, last.l_d, last.l_recon
            );
            rows.extend(new_rows);
            if let Some(dir) = run_dir {
                write_loss_log(&dir.join(LOSS_LOG), &rows)?;
                let every = self.config.checkpoint_every;
                if self.epoch == self.config.epochs || (every > 0 && self.epoch.is_multiple_of(every)) {
                    self.save(&checkpoint_path(dir, self.epoch))?;
                }
            }
        }
        Ok(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container {
            meta: serde_json::json!({
                "kind": "trainer",
                "train_config": self.config,
                "epoch": self.epoch,
                "step": self.step,
                "rng": { "kind": "chacha8", "seed": self.config.seed, "stream": "epoch" },
                "opt_g_step": self.opt_g.step,
                "opt_d_step": self.opt_d.step,
            }),
            tensors: BTreeMap::new(),
        };
        self.params.write_into(&mut c);
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (name, slot) in &opt.slots {
                c.tensors.insert(format!("{tag}.m.{name}"), slot.m.clone());
                c.tensors.insert(format!("{tag}.v.{name}"), slot.v.clone());
            }
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let kind: String = c.meta_field("kind")?;
        if kind != "trainer" {
            return Err(HinetError::corrupt("kind", format!("expected a trainer checkpoint, found {kind}")));
        }
        let config: TrainConfig = c.meta_field("train_config")?;
        let epoch = c.meta_field("epoch")?;
        let step = c.meta_field("step")?;
        let mut opts = Vec::new();
        for (tag, step_field) in [("adam_g", "opt_g_step"), ("adam_d", "opt_d_step")] {
            let mut opt = Adam::new(config.adam());
            opt.step = c.meta_field(step_field)?;
            let m = c.take_prefixed(&format!("{tag}.m."));
            let mut v = c.take_prefixed(&format!("{tag}.v."));
            for (name, m) in m {
                let v = v
                    .remove(&name)
                    .ok_or_else(|| HinetError::corrupt(format!("{tag}.v.{name}"), "missing second moment"))?;
                opt.slots.insert(name, AdamSlot { m, v });
            }
            opts.push(opt);
        }
        let params = HiNetParams::read_from(&mut c)?;
        let opt_d = opts.pop().unwrap();
        let opt_g = opts.pop().unwrap();
        Ok(Self {
            params,
            config,
            opt_g,
            opt_d,
            epoch,
            step,
        })
    }
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_epoch_{epoch}"))
}
