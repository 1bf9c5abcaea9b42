//! Downstream adaptation of a pretrained encoder: task heads, freezing
//! regimes, LoRA adapters, and the fine-tuning loop.
//!
//! A task model is embedder + encoder + mean pool + linear head. Nothing is
//! masked. The decoder, bridge, mask token and reconstruction heads are not
//! part of it.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::backbone::{pool, pool_backward};
use crate::config::KvConfig;
use crate::container::TensorFile;
use crate::data::TaskData;
use crate::embedding::{EmbedCache, ModalityEmbedder, PositionalTable};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, MultimodalMae, TokenInput};
use crate::nn::{join, Linear, LoraAdapter, Mat, Param, Parameterized, StackCache, TransformerStack};
use crate::objectives::{
    argmax, metric_mean_localization_error, metric_mean_per_class_accuracy, task_loss_grad, MetricRecord, TaskKind,
};
use crate::pretrainer::{restore_params, Adam, AdamConfig};
use crate::rng::{rng_for, TAG_HEAD, TAG_LORA, TAG_SHUFFLE};
use crate::signalgen::tasks::Target;
use crate::signalgen::Modality;

/// Output layout of a task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification { n_classes: usize },
    Regression { out_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub modality: Modality,
    pub kind: HeadKind,
}

impl TaskSpec {
    pub fn classification(name: &str, modality: Modality, n_classes: usize) -> Self {
        Self { name: name.into(), modality, kind: HeadKind::Classification { n_classes } }
    }

    pub fn regression(name: &str, modality: Modality, out_dim: usize) -> Self {
        Self { name: name.into(), modality, kind: HeadKind::Regression { out_dim } }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            HeadKind::Classification { n_classes } => n_classes,
            HeadKind::Regression { out_dim } => out_dim,
        }
    }

    pub fn loss_kind(&self) -> TaskKind {
        match self.kind {
            HeadKind::Classification { .. } => TaskKind::Classification,
            HeadKind::Regression { .. } => TaskKind::Regression,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            HeadKind::Classification { .. } => "mean_per_class_accuracy",
            HeadKind::Regression { .. } => "mean_localization_error",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            HeadKind::Classification { n_classes } if n_classes < 2 => {
                Err(Error::Config(format!("task {} needs at least 2 classes", self.name)))
            }
            HeadKind::Regression { out_dim: 0 } => Err(Error::Config(format!("task {} has no outputs", self.name))),
            _ => Ok(()),
        }
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("task.name", &self.name);
        kv.set("task.modality", self.modality.tag());
        match self.kind {
            HeadKind::Classification { n_classes } => {
                kv.set("task.kind", "classification");
                kv.set("task.out_dim", n_classes);
            }
            HeadKind::Regression { out_dim } => {
                kv.set("task.kind", "regression");
                kv.set("task.out_dim", out_dim);
            }
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let modality_tag: String = kv.require("task.modality")?;
        let modality = Modality::from_tag(&modality_tag)
            .ok_or_else(|| Error::Config(format!("unknown modality '{modality_tag}'")))?;
        let out_dim = kv.require("task.out_dim")?;
        let kind = match kv.get_str("task.kind") {
            Some("classification") => HeadKind::Classification { n_classes: out_dim },
            Some("regression") => HeadKind::Regression { out_dim },
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        };
        let spec = Self { name: kv.require("task.name")?, modality, kind };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 32, alpha: 32.0 }
    }
}

/// Which encoder parameters fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FreezePolicy {
    /// Encoder frozen end to end.
    LinearProbe,
    /// The last `k` encoder blocks train.
    Partial { k: usize },
    /// Query/value adapters on every block; original weights frozen.
    Lora(LoraConfig),
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePolicy::LinearProbe => write!(f, "lp"),
            FreezePolicy::Partial { k } => write!(f, "ft-{k}"),
            FreezePolicy::Lora(c) => write!(f, "lora(rank={}, alpha={})", c.rank, c.alpha),
        }
    }
}

impl FreezePolicy {
    pub fn write_kv(&self, kv: &mut KvConfig) {
        match self {
            FreezePolicy::LinearProbe => kv.set("finetune.regime", "lp"),
            FreezePolicy::Partial { k } => {
                kv.set("finetune.regime", "ft");
                kv.set("finetune.k", k);
            }
            FreezePolicy::Lora(c) => {
                kv.set("finetune.regime", "lora");
                kv.set("finetune.rank", c.rank);
                kv.set("finetune.alpha", c.alpha);
            }
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        match kv.get_str("finetune.regime") {
            Some("lp") | None => Ok(FreezePolicy::LinearProbe),
            Some("ft") => Ok(FreezePolicy::Partial { k: kv.get_or("finetune.k", 2)? }),
            Some("lora") => {
                let d = LoraConfig::default();
                Ok(FreezePolicy::Lora(LoraConfig {
                    rank: kv.get_or("finetune.rank", d.rank)?,
                    alpha: kv.get_or("finetune.alpha", d.alpha)?,
                }))
            }
            Some(other) => Err(Error::Config(format!("unknown regime '{other}' (expected lp, ft or lora)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub spec: TaskSpec,
    pub model_config: ModelConfig,
    pub embedder: ModalityEmbedder,
    pub encoder: TransformerStack,
    pub head: Linear,
    pub pos: PositionalTable,
    pub policy: Option<FreezePolicy>,
}

/// What [`TaskModel::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct TaskCache {
    embed: EmbedCache,
    enc: StackCache,
    pooled: Mat,
    n_tokens: usize,
}

/// Build a task model from the encoder side of a pretrained model. The head
/// is drawn from `seed`.
pub fn attach_head(pretrained: &MultimodalMae, spec: TaskSpec, seed: u64) -> Result<TaskModel> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[TAG_HEAD]);
    let head = Linear::new(pretrained.config.backbone.enc_dim, spec.out_dim(), &mut rng);
    Ok(TaskModel {
        spec,
        model_config: pretrained.config,
        embedder: pretrained.embedder.clone(),
        encoder: pretrained.backbone.encoder.clone(),
        head,
        pos: pretrained.pos_enc.clone(),
        policy: None,
    })
}

impl TaskModel {
    pub fn forward(&self, input: &TokenInput) -> Result<(Mat, TaskCache)> {
        if input.modality() != self.spec.modality {
            return Err(Error::Config(format!(
                "task {} takes {} inputs, got {}",
                self.spec.name,
                self.spec.modality.tag(),
                input.modality().tag()
            )));
        }
        let (seq, embed) = match input {
            TokenInput::Image(p) => self.embedder.embed_image(p, &self.pos)?,
            TokenInput::Iq(s) => self.embedder.embed_iq(s, &self.pos)?,
        };
        let (features, enc) = self.encoder.forward(&seq.tokens)?;
        let pooled = pool(&features)?;
        let out = self.head.forward(&pooled)?;
        Ok((out, TaskCache { embed, enc, pooled, n_tokens: seq.tokens.nrows() }))
    }

    pub fn predict(&self, input: &TokenInput) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0.row(0).to_vec())
    }

    /// Accumulate gradients of the loss given `d loss / d output`.
    pub fn backward(&mut self, cache: &TaskCache, dout: &Mat) {
        let dpooled = self.head.backward(&cache.pooled, dout);
        let dfeatures = pool_backward(&dpooled, cache.n_tokens);
        let dz = self.encoder.backward(&cache.enc, &dfeatures);
        self.embedder.backward(&cache.embed, &dz);
    }

    /// Set trainable flags for `policy`, injecting LoRA adapters (drawn from
    /// `seed`) when requested. Any earlier adapters are removed first.
    pub fn apply_freeze(&mut self, policy: FreezePolicy, seed: u64) -> Result<()> {
        let depth = self.encoder.blocks.len();
        if let FreezePolicy::Partial { k } = policy {
            if k > depth {
                return Err(Error::Config(format!("cannot unfreeze {k} of {depth} encoder blocks")));
            }
        }
        if let FreezePolicy::Lora(c) = policy {
            if c.rank == 0 {
                return Err(Error::Config("LoRA rank must be positive".into()));
            }
        }
        self.detach_adapters();
        self.set_requires_grad(false);
        self.head.set_requires_grad(true);
        match self.spec.modality {
            Modality::ImageLike => self.embedder.image_proj.set_requires_grad(true),
            Modality::Iq => {
                self.embedder.iq_proj.set_requires_grad(true);
                self.embedder.antenna.requires_grad = true;
            }
        }
        match policy {
            FreezePolicy::LinearProbe => {}
            FreezePolicy::Partial { k } => {
                for block in &mut self.encoder.blocks[depth - k..] {
                    block.set_requires_grad(true);
                }
            }
            FreezePolicy::Lora(c) => {
                let mut rng = rng_for(seed, &[TAG_LORA]);
                let d = self.encoder.dim();
                for block in &mut self.encoder.blocks {
                    block.attn.query_lora = Some(LoraAdapter::new(d, d, c.rank, c.alpha, &mut rng));
                    block.attn.value_lora = Some(LoraAdapter::new(d, d, c.rank, c.alpha, &mut rng));
                }
            }
        }
        self.policy = Some(policy);
        Ok(())
    }

    /// Remove LoRA adapters, leaving the frozen projections untouched.
    pub fn detach_adapters(&mut self) {
        for block in &mut self.encoder.blocks {
            block.attn.query_lora = None;
            block.attn.value_lora = None;
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.requires_grad {
                n += p.len();
            }
        });
        n
    }

    /// Parameter count of LoRA adapters only.
    pub fn adapter_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |name, p| {
            if name.contains("_lora.") {
                n += p.len();
            }
        });
        n
    }

    pub fn evaluate(&self, data: &TaskData) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation set is empty".into()));
        }
        let preds = data.inputs.iter().map(|x| self.predict(x)).collect::<Result<Vec<_>>>()?;
        match self.spec.kind {
            HeadKind::Classification { n_classes } => {
                let labels = class_labels(&data.targets, n_classes)?;
                let guesses: Vec<usize> = preds.iter().map(|p| argmax(p)).collect();
                Ok(metric_mean_per_class_accuracy(&guesses, &labels, n_classes))
            }
            HeadKind::Regression { .. } => {
                let truth = data
                    .targets
                    .iter()
                    .map(|t| match t {
                        Target::Vector(v) => Ok(v.clone()),
                        Target::Class(_) => Err(Error::Dataset("class label in a regression task".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                metric_mean_localization_error(&preds, &truth)
            }
        }
    }

    /// Descriptor plus every trainable tensor.
    pub fn adapter_file(&self) -> Result<TensorFile> {
        let policy = self.policy.ok_or_else(|| Error::Config("no freeze policy applied".into()))?;
        let mut kv = self.model_config.to_kv();
        self.spec.write_kv(&mut kv);
        policy.write_kv(&mut kv);
        kv.set("file.kind", "adapter");
        let mut f = TensorFile::new(kv);
        self.visit_params("", &mut |name, p| {
            if p.requires_grad {
                f.push(name, p.value.clone());
            }
        });
        Ok(f)
    }

    pub fn save_adapter(&self, path: &Path) -> Result<()> {
        self.adapter_file()?.save(path)
    }

    /// Rebuild a fine-tuned task model on top of a resident pretrained
    /// backbone from its adapter file.
    pub fn from_adapter(pretrained: &MultimodalMae, file: &TensorFile) -> Result<Self> {
        if file.config.get_str("file.kind") != Some("adapter") {
            return Err(Error::CorruptCheckpoint("file is not an adapter file".into()));
        }
        let cfg = ModelConfig::from_kv(&file.config)?;
        if cfg != pretrained.config {
            return Err(Error::CheckpointMismatch("adapter was trained on a differently shaped backbone".into()));
        }
        let spec = TaskSpec::from_kv(&file.config)?;
        let policy = FreezePolicy::from_kv(&file.config)?;
        let mut model = attach_head(pretrained, spec, 0)?;
        model.apply_freeze(policy, 0)?;
        let names: Vec<String> = {
            let mut v = Vec::new();
            model.visit_params("", &mut |n, p| {
                if p.requires_grad {
                    v.push(n.to_string());
                }
            });
            v
        };
        if let Some((extra, _)) = file.tensors.iter().find(|(n, _)| !names.contains(n)) {
            return Err(Error::CheckpointMismatch(format!("unknown tensor '{extra}' in adapter file")));
        }
        let mut trainable = Trainable(&mut model);
        restore_params(&mut trainable, "", file)?;
        Ok(model)
    }

    pub fn load_adapter(pretrained: &MultimodalMae, path: &Path) -> Result<Self> {
        Self::from_adapter(pretrained, &TensorFile::load(path)?)
    }
}

/// View of only the trainable parameters of a model.
struct Trainable<'a, M: Parameterized>(&'a mut M);

impl<M: Parameterized> Parameterized for Trainable<'_, M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.0.visit_params(prefix, &mut |n, p| {
            if p.requires_grad {
                f(n, p)
            }
        });
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.0.visit_params_mut(prefix, &mut |n, p| {
            if p.requires_grad {
                f(n, p)
            }
        });
    }
}

impl Parameterized for TaskModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embedder.visit_params(&join(prefix, "embed"), f);
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embedder.visit_params_mut(&join(prefix, "embed"), f);
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

fn class_labels(targets: &[Target], n_classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|t| match t {
            Target::Class(c) if *c < n_classes => Ok(*c),
            Target::Class(c) => Err(Error::OutOfRange(format!("label {c} with {n_classes} classes"))),
            Target::Vector(_) => Err(Error::Dataset("vector target in a classification task".into())),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() }, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("finetune.epochs", self.epochs);
        kv.set("finetune.batch_size", self.batch_size);
        kv.set("finetune.lr", self.adam.lr);
        kv.set("finetune.seed", self.seed);
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            epochs: kv.get_or("finetune.epochs", d.epochs)?,
            batch_size: kv.get_or("finetune.batch_size", d.batch_size)?,
            adam: AdamConfig { lr: kv.get_or("finetune.lr", d.adam.lr)?, ..d.adam },
            seed: kv.get_or("finetune.seed", d.seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub metric: MetricRecord,
    pub steps: usize,
}

/// Minimize the task loss over the trainable parameters with Adam at a
/// constant rate, then score the held-out split.
pub fn finetune(
    model: &mut TaskModel,
    train: &TaskData,
    test: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("fine-tuning needs non-empty train and test splits".into()));
    }
    if train.inputs.len() != train.targets.len() {
        return Err(shape_err("inputs and targets differ in length"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if model.policy.is_none() {
        model.apply_freeze(FreezePolicy::LinearProbe, cfg.seed)?;
    }
    let kind = model.spec.loss_kind();
    let mut opt = Adam::new(cfg.adam);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (out, cache) = model.forward(&train.inputs[i])?;
                let (loss, grad) = task_loss_grad(out.row(0).as_slice().expect("row"), &train.targets[i], kind)?;
                total += loss;
                let dout =
                    Mat::from_shape_vec((1, grad.len()), grad.iter().map(|g| g * scale).collect()).expect("row shape");
                model.backward(&cache, &dout);
            }
            opt.step(model, cfg.adam.lr);
            steps += 1;
        }
        epoch_loss.push(total / train.len() as f64);
    }
    let value = model.evaluate(test)?;
    Ok(FinetuneReport {
        epoch_loss,
        metric: MetricRecord {
            task: model.spec.name.clone(),
            metric: model.spec.metric_name().into(),
            value,
            step: steps,
        },
        steps,
    })
}
