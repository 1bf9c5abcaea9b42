//! Masked pretraining over paired image-like and IQ mini-batches.
//!
//! Each step draws one batch per modality, sums the per-sample masked
//! losses of both, divides by the combined batch size, and applies a
//! single Adam update.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::KvConfig;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::{ModelConfig, MultimodalMae, TokenInput};
use crate::nn::{Mat, Parameterized};
use crate::objectives::LossReport;
use crate::rng::{derive_seed, rng_for, TAG_MASK, TAG_SHUFFLE};
use crate::signalgen::Modality;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and only
/// exist for parameters that have been trainable at some update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update with learning rate `lr` to every trainable parameter.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut("", &mut |name, p| {
            if !p.requires_grad {
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| Mat::zeros(p.value.dim()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Mat::zeros(p.value.dim()));
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(&p.grad).for_each(|w, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            });
        });
    }
}

/// Linear warm-up from 0 to `base_lr`, then cosine annealing to 0, indexed
/// by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn from_epochs(
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
        base_lr: f64,
    ) -> Result<Self> {
        if warmup_epochs >= total_epochs {
            return Err(Error::Config(format!("warmup {warmup_epochs} must be below total {total_epochs} epochs")));
        }
        if steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(Self { base_lr, warmup_steps: warmup_epochs * steps_per_epoch, total_steps: total_epochs * steps_per_epoch })
    }
}

pub fn lr_at(step: usize, sched: &Schedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::OutOfRange(format!("step {step} beyond schedule end {}", sched.total_steps)));
    }
    if step < sched.warmup_steps {
        return Ok(sched.base_lr * step as f64 / sched.warmup_steps as f64);
    }
    let span = (sched.total_steps - sched.warmup_steps).max(1) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    Ok(sched.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Per-modality masking ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRatios {
    pub image: f64,
    pub iq: f64,
}

impl MaskRatios {
    pub fn both(ratio: f64) -> Self {
        Self { image: ratio, iq: ratio }
    }

    pub fn for_modality(&self, modality: Modality) -> f64 {
        match modality {
            Modality::ImageLike => self.image,
            Modality::Iq => self.iq,
        }
    }
}

impl Default for MaskRatios {
    fn default() -> Self {
        Self::both(0.7)
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Samples per modality per step.
    pub batch_size: usize,
    pub mask_ratio: MaskRatios,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            warmup_epochs: 40,
            batch_size: 16,
            mask_ratio: MaskRatios::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("train.epochs", self.epochs);
        kv.set("train.warmup_epochs", self.warmup_epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.mask_ratio_image", self.mask_ratio.image);
        kv.set("train.mask_ratio_iq", self.mask_ratio.iq);
        kv.set("train.lr", self.adam.lr);
        kv.set("train.beta1", self.adam.beta1);
        kv.set("train.beta2", self.adam.beta2);
        kv.set("train.eps", self.adam.eps);
        kv.set("train.seed", self.seed);
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        // `train.mask_ratio` sets both modalities; the specific keys win.
        let shared = kv.get_or("train.mask_ratio", d.mask_ratio.image)?;
        let cfg = Self {
            epochs: kv.get_or("train.epochs", d.epochs)?,
            warmup_epochs: kv.get_or("train.warmup_epochs", d.warmup_epochs)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            mask_ratio: MaskRatios {
                image: kv.get_or("train.mask_ratio_image", shared)?,
                iq: kv.get_or("train.mask_ratio_iq", shared)?,
            },
            adam: AdamConfig {
                lr: kv.get_or("train.lr", d.adam.lr)?,
                beta1: kv.get_or("train.beta1", d.adam.beta1)?,
                beta2: kv.get_or("train.beta2", d.adam.beta2)?,
                eps: kv.get_or("train.eps", d.adam.eps)?,
            },
            seed: kv.get_or("train.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup must be shorter than training".into()));
        }
        for r in [self.mask_ratio.image, self.mask_ratio.iq] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Multipliers on each modality's loss. Both are 1 in normal training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityWeights {
    pub image: f64,
    pub iq: f64,
}

impl Default for ModalityWeights {
    fn default() -> Self {
        Self { image: 1.0, iq: 1.0 }
    }
}

/// A sample together with the mask drawn for it this step.
#[derive(Debug, Clone, Copy)]
pub struct MaskedSample<'a> {
    pub input: &'a TokenInput,
    pub plan: &'a MaskPlan,
}

/// One optimizer update from a paired batch.
pub fn pretrain_step(
    model: &mut MultimodalMae,
    opt: &mut Adam,
    batch_image: &[MaskedSample<'_>],
    batch_iq: &[MaskedSample<'_>],
    lr: f64,
    weights: ModalityWeights,
) -> Result<LossReport> {
    if batch_image.is_empty() || batch_iq.is_empty() {
        return Err(Error::Empty("pretraining needs a non-empty batch of each modality".into()));
    }
    for (batch, want) in [(batch_image, Modality::ImageLike), (batch_iq, Modality::Iq)] {
        if batch.iter().any(|s| s.input.modality() != want) {
            return Err(Error::Config(format!("{} batch holds a sample of the other modality", want.tag())));
        }
    }
    let denom = (batch_image.len() + batch_iq.len()) as f64;
    model.zero_grad();
    let mut report = LossReport::default();
    let mut sums = [0.0, 0.0];
    for (k, batch, w) in [(0, batch_image, weights.image), (1, batch_iq, weights.iq)] {
        for s in batch {
            let fwd = model.forward_sample(s.input, s.plan)?;
            sums[k] += fwd.loss;
            if k == 0 {
                report.n_masked_image += s.plan.masked.len();
            } else {
                report.n_masked_iq += s.plan.masked.len();
            }
            if w != 0.0 {
                model.backward_sample(s.input, s.plan, &fwd, w / denom)?;
            }
        }
    }
    report.loss_image = sums[0] / batch_image.len() as f64;
    report.loss_iq = sums[1] / batch_iq.len() as f64;
    report.combined = (weights.image * sums[0] + weights.iq * sums[1]) / denom;
    opt.step(model, lr);
    Ok(report)
}

/// One line of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_image: f64,
    pub loss_iq: f64,
    pub combined: f64,
    pub lr: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} loss_image={} loss_iq={} combined={} lr={}",
            self.epoch, self.step, self.loss_image, self.loss_iq, self.combined, self.lr
        )
    }
}

/// Model, optimizer, and position in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MultimodalMae,
    pub optimizer: Adam,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
}

/// Write every parameter of `model` as `{prefix}{name}`.
pub fn store_params<M: Parameterized + ?Sized>(model: &M, prefix: &str, file: &mut TensorFile) {
    model.visit_params("", &mut |name, p| file.push(format!("{prefix}{name}"), p.value.clone()));
}

/// Copy tensors named `{prefix}{name}` into `model`. Every parameter must be
/// present with a matching shape.
pub fn restore_params<M: Parameterized + ?Sized>(model: &mut M, prefix: &str, file: &TensorFile) -> Result<()> {
    let mut problem = None;
    model.visit_params_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match file.get(&format!("{prefix}{name}")) {
            None => problem = Some(format!("parameter {name} missing from file")),
            Some(m) if m.dim() != p.value.dim() => {
                problem = Some(format!("parameter {name}: file shape {:?}, model shape {:?}", m.dim(), p.value.dim()))
            }
            Some(m) => p.value.assign(m),
        }
    });
    match problem {
        Some(msg) => Err(Error::CheckpointMismatch(msg)),
        None => Ok(()),
    }
}

impl Checkpoint {
    pub fn config_blob(&self) -> KvConfig {
        let mut kv = self.model.config.to_kv();
        self.train.write_kv(&mut kv);
        kv.set("state.step", self.step);
        kv.set("state.adam_t", self.optimizer.t);
        kv.set("file.kind", "checkpoint");
        kv
    }

    pub fn to_file(&self) -> TensorFile {
        let mut f = TensorFile::new(self.config_blob());
        store_params(&self.model, "param/", &mut f);
        for (name, m) in &self.optimizer.m {
            f.push(format!("adam.m/{name}"), m.clone());
        }
        for (name, v) in &self.optimizer.v {
            f.push(format!("adam.v/{name}"), v.clone());
        }
        f
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        if file.config.get_str("file.kind") != Some("checkpoint") {
            return Err(Error::CorruptCheckpoint("file is not a pretraining checkpoint".into()));
        }
        let model_cfg = ModelConfig::from_kv(&file.config)?;
        let train = TrainConfig::from_kv(&file.config)?;
        let mut model = MultimodalMae::new(model_cfg, 0)?;
        let known = model.param_names();
        let mut optimizer = Adam::new(train.adam);
        optimizer.t = file.config.require("state.adam_t")?;
        for (name, m) in &file.tensors {
            let (kind, pname) =
                name.split_once('/').ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor '{name}'")))?;
            if !known.iter().any(|k| k == pname) {
                return Err(Error::CheckpointMismatch(format!("unknown tensor '{name}'")));
            }
            match kind {
                "param" => {}
                "adam.m" => {
                    optimizer.m.insert(pname.to_string(), m.clone());
                }
                "adam.v" => {
                    optimizer.v.insert(pname.to_string(), m.clone());
                }
                _ => return Err(Error::CheckpointMismatch(format!("unknown tensor '{name}'"))),
            }
        }
        restore_params(&mut model, "param/", file)?;
        Ok(Self { model, optimizer, train, step: file.config.require("state.step")? })
    }

    /// Copy this checkpoint's parameters into an existing model, which must
    /// have the same configuration.
    pub fn load_into(&self, model: &mut MultimodalMae) -> Result<()> {
        restore_params(model, "param/", &self.to_file())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_file().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_file(&TensorFile::load(path)?)
}

/// Round-robin paired training over two datasets.
///
/// All randomness is a function of `(seed, epoch or step, modality, index)`,
/// so a trainer rebuilt from a checkpoint continues exactly where the
/// original left off.
pub struct Trainer<'a> {
    pub model: MultimodalMae,
    pub opt: Adam,
    pub config: TrainConfig,
    pub schedule: Schedule,
    /// Completed optimizer steps.
    pub step: usize,
    pub curve: Vec<LossRecord>,
    pub weights: ModalityWeights,
    image: &'a [TokenInput],
    iq: &'a [TokenInput],
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: MultimodalMae,
        config: TrainConfig,
        image: &'a [TokenInput],
        iq: &'a [TokenInput],
    ) -> Result<Self> {
        let opt = Adam::new(config.adam);
        Self::resume(Checkpoint { model, optimizer: opt, train: config, step: 0 }, image, iq)
    }

    pub fn resume(ckpt: Checkpoint, image: &'a [TokenInput], iq: &'a [TokenInput]) -> Result<Self> {
        ckpt.train.validate()?;
        if image.is_empty() || iq.is_empty() {
            return Err(Error::Empty("both pretraining datasets must be non-empty".into()));
        }
        for (data, want) in [(image, Modality::ImageLike), (iq, Modality::Iq)] {
            if let Some(bad) = data.iter().find(|s| s.modality() != want) {
                return Err(Error::Dataset(format!("{} dataset holds a {} sample", want.tag(), bad.modality().tag())));
            }
        }
        let spe = steps_per_epoch(image.len(), iq.len(), ckpt.train.batch_size);
        let schedule = Schedule::from_epochs(ckpt.train.warmup_epochs, ckpt.train.epochs, spe, ckpt.train.adam.lr)?;
        Ok(Self {
            model: ckpt.model,
            opt: ckpt.optimizer,
            config: ckpt.train,
            schedule,
            step: ckpt.step,
            curve: Vec::new(),
            weights: ModalityWeights::default(),
            image,
            iq,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.image.len(), self.iq.len(), self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Dataset indices for each modality at `step`. The longer dataset is
    /// walked once per epoch; the shorter one is reshuffled and cycled so
    /// both batches have the same size.
    pub fn batch_indices(&self, step: usize) -> (Vec<usize>, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let (epoch, s) = (step / spe, step % spe);
        let n_long = self.image.len().max(self.iq.len());
        let b = self.config.batch_size;
        let positions = s * b..((s + 1) * b).min(n_long);
        let pick = |n: usize, modality: Modality| {
            let mut perms: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            positions
                .clone()
                .map(|p| {
                    let cycle = p / n;
                    let perm = perms.entry(cycle).or_insert_with(|| {
                        let mut idx: Vec<usize> = (0..n).collect();
                        let tags = [TAG_SHUFFLE, epoch as u64, modality.index(), cycle as u64];
                        idx.shuffle(&mut rng_for(self.config.seed, &tags));
                        idx
                    });
                    perm[p % n]
                })
                .collect::<Vec<_>>()
        };
        (pick(self.image.len(), Modality::ImageLike), pick(self.iq.len(), Modality::Iq))
    }

    fn plans(&self, step: usize, modality: Modality, count: usize, n_tokens: usize) -> Result<Vec<MaskPlan>> {
        (0..count)
            .map(|i| {
                let seed = derive_seed(self.config.seed, &[TAG_MASK, step as u64, modality.index(), i as u64]);
                sample_mask(n_tokens, self.config.mask_ratio.for_modality(modality), seed)
            })
            .collect()
    }

    /// Run one paired step and record it on the loss curve.
    pub fn train_step(&mut self) -> Result<LossReport> {
        if self.is_done() {
            return Err(Error::OutOfRange("training schedule already complete".into()));
        }
        let step = self.step;
        let (gi, qi) = self.batch_indices(step);
        let cfg = &self.model.config;
        let pg = self.plans(step, Modality::ImageLike, gi.len(), cfg.n_patches())?;
        let pq = self.plans(step, Modality::Iq, qi.len(), cfg.n_segments())?;
        let bg: Vec<MaskedSample> =
            gi.iter().zip(&pg).map(|(&i, plan)| MaskedSample { input: &self.image[i], plan }).collect();
        let bq: Vec<MaskedSample> =
            qi.iter().zip(&pq).map(|(&i, plan)| MaskedSample { input: &self.iq[i], plan }).collect();
        let lr = lr_at(step, &self.schedule)?;
        let report = pretrain_step(&mut self.model, &mut self.opt, &bg, &bq, lr, self.weights)?;
        self.curve.push(LossRecord {
            epoch: step / self.steps_per_epoch(),
            step,
            loss_image: report.loss_image,
            loss_iq: report.loss_iq,
            combined: report.combined,
            lr,
        });
        self.step += 1;
        Ok(report)
    }

    /// Run up to `n` more steps, stopping at the end of the schedule.
    pub fn run(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.train_step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), optimizer: self.opt.clone(), train: self.config, step: self.step }
    }
}

pub fn steps_per_epoch(n_image: usize, n_iq: usize, batch: usize) -> usize {
    n_image.max(n_iq).div_ceil(batch.max(1))
}

/// Train a fresh model for the full schedule. The model is initialized from
/// `config.seed`.
pub fn run_pretraining(
    image: &[TokenInput],
    iq: &[TokenInput],
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let model = MultimodalMae::new(model_config, config.seed)?;
    let mut trainer = Trainer::new(model, config, image, iq)?;
    let total = trainer.total_steps();
    trainer.run(total)?;
    let ckpt = trainer.checkpoint();
    Ok((ckpt, trainer.curve))
}
