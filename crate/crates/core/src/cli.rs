//! Batch command-line surface.
//!
//! Every verb resolves its settings from `--config` files, verb flags and
//! `--set key=value` overrides (later wins), writes the resolved settings to
//! `config.txt` in its output directory, and can be re-run from that file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};

use crate::backbone::block_param_count;
use crate::config::KvConfig;
use crate::data::StoredDataset;
use crate::finetuner::{attach_head, finetune, FinetuneConfig, FreezePolicy, TaskModel, TaskSpec};
use crate::masking::{masked_count, sample_mask, MaskPlan};
use crate::model::{ModelConfig, MultimodalMae, Scope, TokenInput};
use crate::objectives::MetricRecord;
use crate::pretrainer::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};
use crate::rng::{derive_seed, TAG_MASK};
use crate::signalgen::tasks::{position_task, FingerprintTask, Target};
use crate::signalgen::{compute_iq_stats, compute_spectrogram_stats, Modality};
use crate::tokenizer::{desegment, unpatchify, PatchSequence, SegmentSequence};
use crate::{data, Error};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MMWFM_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::Io(_) | Error::CorruptCheckpoint(_) | Error::Version { .. }) => EXIT_IO,
            CliError::Run(_) => EXIT_VALIDATION,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmwfm", version, about = "Multimodal masked-autoencoder foundation model for wireless signals")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Key=value config file (may `include` others).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$MMWFM_OUT/<verb>` or `runs/<verb>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one config key. Repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Use the small desk-scale model preset.
    #[arg(long, global = true)]
    pub tiny: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate pretraining corpora and labeled task splits.
    GenData {
        /// Samples per modality.
        #[arg(long)]
        count: Option<usize>,
        /// Samples per task split.
        #[arg(long)]
        task_count: Option<usize>,
    },
    /// Masked-autoencoder pretraining over both modalities.
    Pretrain {
        /// Directory written by `gen-data`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Warm-up epochs.
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a checkpoint; its stored settings are kept.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained encoder on a labeled task.
    Finetune {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Task directory holding `train/` and `test/` splits.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Task name used in metric records. Defaults to the directory name.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_enum)]
        regime: Option<Regime>,
        /// Number of trailing encoder blocks unfrozen by `--regime ft`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a fine-tuned adapter on a labeled split.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        adapter: Option<PathBuf>,
        /// Split directory, e.g. `tasks/fingerprint/test`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Emit original | masked | reconstruction figures for one sample.
    Reconstruct {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory of either modality.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        /// Comma-separated mask ratios.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Print per-scope parameter counts.
    Inspect {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Regime {
    Lp,
    Ft,
    Lora,
}

impl Regime {
    fn tag(self) -> &'static str {
        match self {
            Regime::Lp => "lp",
            Regime::Ft => "ft",
            Regime::Lora => "lora",
        }
    }
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Inspect { .. } => "inspect",
        }
    }

    /// Flag values as config keys. `None` leaves the key untouched.
    fn flag_keys(&self, seed: Option<u64>) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        fn p(v: &Option<PathBuf>) -> Option<String> {
            v.as_ref().map(|x| x.display().to_string())
        }
        match self {
            Command::GenData { count, task_count } => {
                vec![("data.count", s(count)), ("data.task_count", s(task_count)), ("data.seed", s(&seed))]
            }
            Command::Pretrain { data, epochs, warmup, mask_ratio, batch_size, lr, resume } => vec![
                ("data.dir", p(data)),
                ("train.epochs", s(epochs)),
                ("train.warmup_epochs", s(warmup)),
                ("train.mask_ratio", s(mask_ratio)),
                ("train.batch_size", s(batch_size)),
                ("train.lr", s(lr)),
                ("train.seed", s(&seed)),
                ("pretrain.resume", p(resume)),
            ],
            Command::Finetune { checkpoint, data, task, regime, k, rank, alpha, epochs, batch_size, lr } => vec![
                ("finetune.checkpoint", p(checkpoint)),
                ("data.dir", p(data)),
                ("task.name", task.clone()),
                ("finetune.regime", regime.map(|r| r.tag().to_string())),
                ("finetune.k", s(k)),
                ("finetune.rank", s(rank)),
                ("finetune.alpha", s(alpha)),
                ("finetune.epochs", s(epochs)),
                ("finetune.batch_size", s(batch_size)),
                ("finetune.lr", s(lr)),
                ("finetune.seed", s(&seed)),
            ],
            Command::Evaluate { checkpoint, adapter, data } => {
                vec![("evaluate.checkpoint", p(checkpoint)), ("evaluate.adapter", p(adapter)), ("data.dir", p(data))]
            }
            Command::Reconstruct { checkpoint, data, index, ratios } => vec![
                ("reconstruct.checkpoint", p(checkpoint)),
                ("data.dir", p(data)),
                ("reconstruct.index", s(index)),
                ("reconstruct.ratios", ratios.clone()),
                ("reconstruct.seed", s(&seed)),
            ],
            Command::Inspect { checkpoint, .. } => vec![("inspect.checkpoint", p(checkpoint))],
        }
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let kv = resolve(cli)?;
    let out = output_dir(cli);
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&kv, &out),
        Command::Pretrain { .. } => cmd_pretrain(&kv, &out),
        Command::Finetune { .. } => cmd_finetune(&kv, &out),
        Command::Evaluate { .. } => cmd_evaluate(&kv, &out),
        Command::Reconstruct { .. } => cmd_reconstruct(&kv, &out),
        Command::Inspect { json, .. } => cmd_inspect(&kv, *json),
    }
}

/// Config file, then flags, then `--set` overrides.
pub fn resolve(cli: &Cli) -> CliResult<KvConfig> {
    let mut kv = match &cli.common.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::new(),
    };
    if cli.common.tiny {
        kv.set("model.preset", "tiny");
    }
    for (key, value) in cli.command.flag_keys(cli.common.seed) {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    for o in &cli.common.set {
        kv.set_override(o).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(kv)
}

pub fn output_dir(cli: &Cli) -> PathBuf {
    cli.common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_ROOT.into());
        root.join(cli.command.verb())
    })
}

fn required_path(kv: &KvConfig, key: &str, flag: &str) -> CliResult<PathBuf> {
    kv.get_str(key).map(PathBuf::from).ok_or_else(|| CliError::Usage(format!("missing {flag} (config key {key})")))
}

fn write_snapshot(out: &Path, snapshot: &KvConfig) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), snapshot.to_string())?;
    Ok(())
}

/// Copy the run-level keys (paths, counts, seeds) a verb reads directly.
fn carry(kv: &KvConfig, snapshot: &mut KvConfig, keys: &[&str]) {
    for k in keys {
        if let Some(v) = kv.get_str(k) {
            snapshot.set(k, v);
        }
    }
}

pub const DEFAULT_COUNT: usize = 3200;
pub const DEFAULT_TASK_COUNT: usize = 256;
pub const FINGERPRINT_CLASSES: usize = 4;

pub fn cmd_gen_data(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let cfg = ModelConfig::from_kv(kv)?;
    let count: usize = kv.get_or("data.count", DEFAULT_COUNT)?;
    let task_count: usize = kv.get_or("data.task_count", DEFAULT_TASK_COUNT)?;
    let seed: u64 = kv.get_or("data.seed", 0)?;
    if count == 0 || task_count == 0 {
        return Err(Error::Config("sample counts must be positive".into()).into());
    }
    let mut snapshot = cfg.to_kv();
    snapshot.set("data.count", count);
    snapshot.set("data.task_count", task_count);
    snapshot.set("data.seed", seed);
    write_snapshot(out, &snapshot)?;

    let target = (cfg.image_height, cfg.image_width);
    let spectrograms = data::raw_spectrogram_corpus(&cfg, count, seed)?;
    StoredDataset {
        modality: Modality::ImageLike,
        stats: compute_spectrogram_stats(&spectrograms, target)?,
        labels: vec![None; count],
        samples: spectrograms.into_iter().map(|s| s.data).collect(),
    }
    .write(&out.join("pretrain").join("image"))?;
    let iq = data::raw_iq_corpus(&cfg, count, seed)?;
    StoredDataset {
        modality: Modality::Iq,
        stats: compute_iq_stats(&iq)?,
        labels: vec![None; count],
        samples: iq.into_iter().map(|s| s.data).collect(),
    }
    .write(&out.join("pretrain").join("iq"))?;

    let fp = FingerprintTask::new(FINGERPRINT_CLASSES, cfg.n_antennas, cfg.n_scalars);
    let train = fp.generate(task_count, derive_seed(seed, &[1]))?;
    let test = fp.generate(task_count, derive_seed(seed, &[2]))?;
    let stats = compute_iq_stats(&train.iter().map(|l| l.sample.clone()).collect::<Vec<_>>())?;
    for (split, set) in [("train", train), ("test", test)] {
        StoredDataset {
            modality: Modality::Iq,
            stats,
            labels: set.iter().map(|l| Some(l.target.clone())).collect(),
            samples: set.into_iter().map(|l| l.sample.data).collect(),
        }
        .write(&out.join("tasks").join("fingerprint").join(split))?;
    }

    let side = cfg.image_height;
    let train = position_task(task_count, side, derive_seed(seed, &[3]))?;
    let test = position_task(task_count, side, derive_seed(seed, &[4]))?;
    let stats = compute_spectrogram_stats(&train.iter().map(|l| l.sample.clone()).collect::<Vec<_>>(), target)?;
    for (split, set) in [("train", train), ("test", test)] {
        StoredDataset {
            modality: Modality::ImageLike,
            stats,
            labels: set.iter().map(|l| Some(l.target.clone())).collect(),
            samples: set.into_iter().map(|l| l.sample.data).collect(),
        }
        .write(&out.join("tasks").join("position").join(split))?;
    }
    println!("wrote {count} samples per modality and {task_count} per task split to {}", out.display());
    Ok(())
}

pub fn cmd_pretrain(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let dir = required_path(kv, "data.dir", "--data")?;
    let image_ds = StoredDataset::read(&dir.join("pretrain").join("image"))?;
    let iq_ds = StoredDataset::read(&dir.join("pretrain").join("iq"))?;

    let mut snapshot = KvConfig::new();
    carry(kv, &mut snapshot, &["data.dir", "pretrain.resume"]);
    let (ckpt, resumed) = match kv.get_str("pretrain.resume") {
        Some(path) => (load_checkpoint(Path::new(path))?, true),
        None => {
            let cfg = ModelConfig::from_kv(kv)?;
            let train = TrainConfig::from_kv(kv)?;
            train.validate()?;
            let model = MultimodalMae::new(cfg, train.seed)?;
            let optimizer = crate::pretrainer::Adam::new(train.adam);
            (Checkpoint { model, optimizer, train, step: 0 }, false)
        }
    };
    for (k, v) in ckpt.model.config.to_kv().iter() {
        snapshot.set(k, v);
    }
    ckpt.train.write_kv(&mut snapshot);
    write_snapshot(out, &snapshot)?;

    let cfg = ckpt.model.config.clone();
    let image = image_ds.tokenize(&cfg)?;
    let iq = iq_ds.tokenize(&cfg)?;
    let mut trainer =
        if resumed { Trainer::resume(ckpt, &image, &iq)? } else { Trainer::new(ckpt.model, ckpt.train, &image, &iq)? };
    let spe = trainer.steps_per_epoch();
    let mut log = String::new();
    while !trainer.is_done() {
        let n = spe - trainer.step % spe;
        let before = trainer.curve.len();
        trainer.run(n)?;
        for r in &trainer.curve[before..] {
            log.push_str(&format!("{r}\n"));
        }
        if let Some(last) = trainer.curve.last() {
            println!("{last}");
        }
        fs::write(out.join("loss.txt"), &log)?;
        save_checkpoint(&trainer.checkpoint(), &out.join("checkpoint.bin"))?;
    }
    println!("checkpoint written to {}", out.join("checkpoint.bin").display());
    Ok(())
}

/// Task spec inferred from a labeled training split.
pub fn infer_task(name: &str, train: &StoredDataset, test: &StoredDataset) -> CliResult<TaskSpec> {
    let labels: Vec<&Target> = train
        .labels
        .iter()
        .chain(&test.labels)
        .map(|l| l.as_ref().ok_or_else(|| Error::Dataset("unlabeled sample in a task dataset".into())))
        .collect::<crate::Result<_>>()?;
    let spec = match labels.first() {
        None => return Err(Error::Empty("task dataset has no samples".into()).into()),
        Some(Target::Class(_)) => {
            let mut n = 0;
            for l in &labels {
                match l {
                    Target::Class(c) => n = n.max(c + 1),
                    Target::Vector(_) => return Err(Error::Dataset("mixed label kinds".into()).into()),
                }
            }
            TaskSpec::classification(name, train.modality, n.max(2))
        }
        Some(Target::Vector(v)) => {
            if labels.iter().any(|l| !matches!(l, Target::Vector(w) if w.len() == v.len())) {
                return Err(Error::Dataset("inconsistent regression targets".into()).into());
            }
            TaskSpec::regression(name, train.modality, v.len())
        }
    };
    if test.modality != train.modality {
        return Err(Error::Dataset("train and test splits differ in modality".into()).into());
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_finetune(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let ckpt_path = required_path(kv, "finetune.checkpoint", "--checkpoint")?;
    let dir = required_path(kv, "data.dir", "--data")?;
    let policy = FreezePolicy::from_kv(kv).map_err(|e| CliError::Usage(e.to_string()))?;
    let ft = FinetuneConfig::from_kv(kv)?;
    let name = match kv.get_str("task.name") {
        Some(n) => n.to_string(),
        None => dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "task".into()),
    };

    let ckpt = load_checkpoint(&ckpt_path)?;
    let train_ds = StoredDataset::read(&dir.join("train"))?;
    let test_ds = StoredDataset::read(&dir.join("test"))?;
    let spec = infer_task(&name, &train_ds, &test_ds)?;

    let mut snapshot = KvConfig::new();
    carry(kv, &mut snapshot, &["finetune.checkpoint", "data.dir"]);
    spec.write_kv(&mut snapshot);
    policy.write_kv(&mut snapshot);
    ft.write_kv(&mut snapshot);
    write_snapshot(out, &snapshot)?;

    let cfg = &ckpt.model.config;
    let train = train_ds.task_data(cfg)?;
    let test = test_ds.task_data(cfg)?;
    let mut task = attach_head(&ckpt.model, spec, ft.seed)?;
    task.apply_freeze(policy, ft.seed)?;
    println!(
        "regime {policy}: {} trainable parameters ({} in adapters)",
        task.trainable_param_count(),
        task.adapter_param_count()
    );
    let report = finetune(&mut task, &train, &test, &ft)?;
    let mut lines = String::new();
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        lines.push_str(&format!("epoch={epoch} train_loss={loss}\n"));
    }
    lines.push_str(&format!("{}\n", report.metric));
    fs::write(out.join("metrics.txt"), lines)?;
    let mut file = task.adapter_file()?;
    file.config.set("state.step", report.steps);
    file.save(&out.join("adapter.bin"))?;
    println!("{}", report.metric);
    Ok(())
}

pub fn cmd_evaluate(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let ckpt_path = required_path(kv, "evaluate.checkpoint", "--checkpoint")?;
    let adapter_path = required_path(kv, "evaluate.adapter", "--adapter")?;
    let dir = required_path(kv, "data.dir", "--data")?;
    let mut snapshot = KvConfig::new();
    carry(kv, &mut snapshot, &["evaluate.checkpoint", "evaluate.adapter", "data.dir"]);
    write_snapshot(out, &snapshot)?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let file = crate::container::TensorFile::load(&adapter_path)?;
    let task = TaskModel::from_adapter(&ckpt.model, &file)?;
    let ds = StoredDataset::read(&dir)?;
    if ds.modality != task.spec.modality {
        return Err(Error::Dataset(format!(
            "task expects {} data, {} holds {}",
            task.spec.modality.tag(),
            dir.display(),
            ds.modality.tag()
        ))
        .into());
    }
    let value = task.evaluate(&ds.task_data(&ckpt.model.config)?)?;
    let record = MetricRecord {
        task: task.spec.name.clone(),
        metric: task.spec.metric_name().into(),
        value,
        step: file.config.get_or("state.step", 0)?,
    };
    fs::write(out.join("metrics.txt"), format!("{record}\n"))?;
    println!("{record}");
    Ok(())
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.7, 0.85];

fn parse_ratios(text: &str) -> CliResult<Vec<f64>> {
    let ratios: Vec<f64> = text
        .split(',')
        .map(|r| r.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad mask ratio '{r}'"))))
        .collect::<CliResult<_>>()?;
    if ratios.is_empty() || ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::OutOfRange(format!("mask ratios must lie in [0, 1), got '{text}'")).into());
    }
    Ok(ratios)
}

/// The three panes of one reconstruction figure, in token-precursor space.
/// Masked rows of `masked` are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Triptych {
    pub original: Array2<f64>,
    pub masked: Array2<f64>,
    pub reconstruction: Array2<f64>,
}

/// Masked tokens are shown grayed in the middle pane; the right pane pastes
/// the visible tokens back over the decoder output. With nothing masked it
/// is the plain decoder output.
pub fn triptych(model: &MultimodalMae, input: &TokenInput, plan: &MaskPlan) -> crate::Result<Triptych> {
    let fwd = model.forward_sample(input, plan)?;
    let original = input.precursors().clone();
    let mut masked = original.clone();
    for &i in &plan.masked {
        masked.row_mut(i).fill(f64::NAN);
    }
    let mut reconstruction = fwd.recon;
    if !plan.masked.is_empty() {
        for &i in &plan.kept {
            reconstruction.row_mut(i).assign(&original.row(i));
        }
    }
    Ok(Triptych { original, masked, reconstruction })
}

pub fn mask_for(n_tokens: usize, ratio: f64, seed: u64, index: usize) -> crate::Result<MaskPlan> {
    if masked_count(n_tokens, ratio) == 0 {
        return Ok(MaskPlan::none(n_tokens));
    }
    sample_mask(n_tokens, ratio, derive_seed(seed, &[TAG_MASK, index as u64, ratio.to_bits()]))
}

pub fn cmd_reconstruct(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let ckpt_path = required_path(kv, "reconstruct.checkpoint", "--checkpoint")?;
    let dir = required_path(kv, "data.dir", "--data")?;
    let index: usize = kv.get_or("reconstruct.index", 0)?;
    let seed: u64 = kv.get_or("reconstruct.seed", 0)?;
    let ratios = match kv.get_str("reconstruct.ratios") {
        Some(t) => parse_ratios(t)?,
        None => DEFAULT_RATIOS.to_vec(),
    };
    let mut snapshot = KvConfig::new();
    carry(kv, &mut snapshot, &["reconstruct.checkpoint", "data.dir"]);
    snapshot.set("reconstruct.index", index);
    snapshot.set("reconstruct.seed", seed);
    snapshot.set("reconstruct.ratios", ratios.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    write_snapshot(out, &snapshot)?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let ds = StoredDataset::read(&dir)?;
    if index >= ds.samples.len() {
        return Err(Error::OutOfRange(format!("sample {index} of {} requested", ds.samples.len())).into());
    }
    let single = StoredDataset { samples: vec![ds.samples[index].clone()], labels: vec![None], ..ds };
    let input = single.tokenize(&ckpt.model.config)?.remove(0);
    for ratio in ratios {
        let plan = mask_for(input.len(), ratio, seed, index)?;
        let t = triptych(&ckpt.model, &input, &plan)?;
        let stem = format!("recon_{}_{index:05}_r{:03}", input.modality().tag(), (ratio * 100.0).round() as usize);
        let path = render_triptych(&t, &input, &ckpt.model.config, out, &stem)?;
        println!("ratio {ratio}: {} masked of {} tokens -> {}", plan.masked.len(), input.len(), path.display());
    }
    Ok(())
}

const GUTTER: usize = 4;
const STRIP_HEIGHT: usize = 48;
const MASK_GRAY: u8 = 128;

/// Raster image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    fn new(width: usize, height: usize, channels: usize, fill: u8) -> Self {
        Self { width, height, channels, pixels: vec![fill; width * height * channels] }
    }

    fn put(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    fn blit(&mut self, other: &Raster, x0: usize, y0: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                for c in 0..self.channels {
                    let v = other.pixels[(y * other.width + x) * other.channels + c.min(other.channels - 1)];
                    self.put(x0 + x, y0 + y, c, v);
                }
            }
        }
    }

    /// Binary PGM for one channel, PPM for three.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.pixels);
        bytes
    }

    fn side_by_side(panes: &[Raster]) -> Raster {
        let height = panes.iter().map(|p| p.height).max().unwrap_or(0);
        let width = panes.iter().map(|p| p.width).sum::<usize>() + GUTTER * panes.len().saturating_sub(1);
        let mut out = Raster::new(width, height, panes[0].channels, 255);
        let mut x = 0;
        for p in panes {
            out.blit(p, x, 0);
            x += p.width + GUTTER;
        }
        out
    }
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn finite_range(a: &Array2<f64>) -> (f64, f64) {
    a.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `C x H x W` pane; NaN pixels are painted gray.
fn image_pane(rows: &Array2<f64>, like: &PatchSequence, cfg: &ModelConfig, lo: f64, hi: f64) -> crate::Result<Raster> {
    let seq = PatchSequence { patches: rows.clone(), ..like.clone() };
    let img = unpatchify(&seq, cfg.channels, cfg.image_height, cfg.image_width)?.data;
    let (c, h, w) = img.dim();
    let channels = if c == 3 { 3 } else { 1 };
    let mut r = Raster::new(w, h, channels, 0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let v = img[[ch, y, x]];
                r.put(x, y, ch, if v.is_nan() { MASK_GRAY } else { to_byte(v, lo, hi) });
            }
        }
    }
    Ok(r)
}

/// One waveform strip per antenna; masked spans get a gray background.
fn iq_pane(rows: &Array2<f64>, like: &SegmentSequence, cfg: &ModelConfig, lo: f64, hi: f64) -> crate::Result<Raster> {
    let seq = SegmentSequence { segments: rows.clone(), ..like.clone() };
    let wave = desegment(&seq, cfg.n_antennas, cfg.n_scalars)?.data;
    let (m, t) = wave.dim();
    let mut r = Raster::new(t, m * STRIP_HEIGHT + (m.saturating_sub(1)) * 2, 1, 255);
    let level = |v: f64| STRIP_HEIGHT - 1 - (to_byte(v, lo, hi) as usize * (STRIP_HEIGHT - 1)) / 255;
    for (a, row) in wave.axis_iter(Axis(0)).enumerate() {
        let y0 = a * (STRIP_HEIGHT + 2);
        let mut prev: Option<usize> = None;
        for (x, &v) in row.iter().enumerate() {
            if v.is_nan() {
                for y in 0..STRIP_HEIGHT {
                    r.put(x, y0 + y, 0, MASK_GRAY);
                }
                prev = None;
                continue;
            }
            let y = level(v);
            let (a0, a1) = match prev {
                Some(p) => (p.min(y), p.max(y)),
                None => (y, y),
            };
            for yy in a0..=a1 {
                r.put(x, y0 + yy, 0, 0);
            }
            prev = Some(y);
        }
        if a + 1 < m {
            for x in 0..t {
                for d in 0..2 {
                    r.put(x, y0 + STRIP_HEIGHT + d, 0, 200);
                }
            }
        }
    }
    Ok(r)
}

/// Render the three panes side by side, sharing the original's value range.
pub fn render(t: &Triptych, input: &TokenInput, cfg: &ModelConfig) -> crate::Result<Raster> {
    let (lo, hi) = finite_range(&t.original);
    let panes = [&t.original, &t.masked, &t.reconstruction]
        .into_iter()
        .map(|rows| match input {
            TokenInput::Image(p) => image_pane(rows, p, cfg, lo, hi),
            TokenInput::Iq(s) => iq_pane(rows, s, cfg, lo, hi),
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(Raster::side_by_side(&panes))
}

fn render_triptych(t: &Triptych, input: &TokenInput, cfg: &ModelConfig, out: &Path, stem: &str) -> CliResult<PathBuf> {
    let raster = render(t, input, cfg)?;
    let ext = if raster.channels == 3 { "ppm" } else { "pgm" };
    let path = out.join(format!("{stem}.{ext}"));
    fs::write(&path, raster.to_pnm())?;
    Ok(path)
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub scope: String,
    pub params: usize,
}

pub fn parameter_table(model: &MultimodalMae) -> Vec<CountRow> {
    let b = &model.config.backbone;
    let mut rows: Vec<CountRow> =
        Scope::ALL.iter().map(|&s| CountRow { scope: s.name().into(), params: model.count_params(s) }).collect();
    rows.push(CountRow { scope: "encoder.block".into(), params: block_param_count(b.enc_dim, b.enc_hidden) });
    rows.push(CountRow { scope: "decoder.block".into(), params: block_param_count(b.dec_dim, b.dec_hidden) });
    rows
}

pub fn cmd_inspect(kv: &KvConfig, json: bool) -> CliResult<()> {
    let model = match kv.get_str("inspect.checkpoint") {
        Some(path) => load_checkpoint(Path::new(path))?.model,
        None => MultimodalMae::new(ModelConfig::from_kv(kv)?, 0)?,
    };
    let rows = parameter_table(&model);
    let config = model.config.to_kv();
    if json {
        let value = serde_json::json!({
            "params": rows.iter().map(|r| serde_json::json!({"scope": r.scope, "params": r.params})).collect::<Vec<_>>(),
            "config": config.iter().map(|(k, v)| (k.to_string(), serde_json::Value::from(v))).collect::<serde_json::Map<_, _>>(),
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
    } else {
        println!("{:<16} {:>12}", "scope", "params");
        for r in &rows {
            println!("{:<16} {:>12}", r.scope, r.params);
        }
        println!();
        print!("{config}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PretrainCorpus;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mmwfm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_and_set_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "train.epochs = 5\ntrain.lr = 0.5\ndata.dir = a\n").unwrap();
        let f = file.to_str().unwrap();
        let kv =
            resolve(&parse(&["pretrain", "--config", f, "--epochs", "7", "--lr", "0.25", "--set", "train.lr=0.125"]))
                .unwrap();
        assert_eq!(kv.get::<usize>("train.epochs").unwrap(), Some(7));
        assert_eq!(kv.get::<f64>("train.lr").unwrap(), Some(0.125));
        assert_eq!(kv.get_str("data.dir"), Some("a"));
        assert!(matches!(resolve(&parse(&["inspect", "--set", "novalue"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn defaults_mirror_the_reference_settings() {
        let kv = resolve(&parse(&["pretrain", "--data", "d"])).unwrap();
        let t = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(
            (t.epochs, t.warmup_epochs, t.mask_ratio.image, t.mask_ratio.iq, t.adam.lr),
            (800, 40, 0.7, 0.7, 1e-3)
        );
        let kv = resolve(&parse(&["finetune", "--regime", "lora", "--rank", "32", "--alpha", "32"])).unwrap();
        assert_eq!(
            FreezePolicy::from_kv(&kv).unwrap(),
            FreezePolicy::Lora(crate::finetuner::LoraConfig { rank: 32, alpha: 32.0 })
        );
        let kv = resolve(&parse(&["finetune", "--regime", "ft", "--k", "2"])).unwrap();
        assert_eq!(FreezePolicy::from_kv(&kv).unwrap(), FreezePolicy::Partial { k: 2 });
        assert!(Cli::try_parse_from(["mmwfm", "finetune", "--regime", "ft2"]).is_err());
    }

    #[test]
    fn zero_ratio_triptych_shows_original_and_full_decoder_pass() {
        let cfg = ModelConfig::tiny();
        let model = MultimodalMae::new(cfg, 1).unwrap();
        let corpus = PretrainCorpus::synthetic(&cfg, 2, 1).unwrap();
        for input in [&corpus.image[0], &corpus.iq[0]] {
            let plan = mask_for(input.len(), 0.0, 0, 0).unwrap();
            let t = triptych(&model, input, &plan).unwrap();
            assert_eq!(&t.masked, input.precursors());
            assert_eq!(t.reconstruction, model.forward_sample(input, &MaskPlan::none(input.len())).unwrap().recon);

            let plan = mask_for(input.len(), 0.7, 0, 0).unwrap();
            assert_eq!(plan, mask_for(input.len(), 0.7, 0, 0).unwrap());
            let t = triptych(&model, input, &plan).unwrap();
            for &i in &plan.kept {
                assert_eq!(t.reconstruction.row(i), input.precursors().row(i));
            }
            assert!(plan.masked.iter().all(|&i| t.masked.row(i).iter().all(|v| v.is_nan())));
            let r = render(&t, input, &cfg).unwrap();
            assert_eq!(r.pixels.len(), r.width * r.height);
        }
    }

    #[test]
    fn ratio_lists_are_checked() {
        assert_eq!(parse_ratios("0.5, 0.7").unwrap(), vec![0.5, 0.7]);
        assert!(matches!(parse_ratios("0.5,x"), Err(CliError::Usage(_))));
        assert!(matches!(parse_ratios("1.0"), Err(CliError::Run(Error::OutOfRange(_)))));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::from(std::io::Error::other("x")).exit_code(), EXIT_IO);
        assert_eq!(CliError::Run(Error::CorruptCheckpoint("x".into())).exit_code(), EXIT_IO);
        assert_eq!(CliError::Run(Error::Shape("x".into())).exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn pnm_headers() {
        let g = Raster::new(3, 2, 1, 7);
        assert_eq!(&g.to_pnm()[..11], b"P5\n3 2\n255\n");
        let c = Raster::new(1, 1, 3, 0);
        assert_eq!(c.to_pnm(), b"P6\n1 1\n255\n\0\0\0".to_vec());
    }
}
