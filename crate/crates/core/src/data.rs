//! Synthetic corpora, tokenization against a model config, and the on-disk
//! dataset layout.
//!
//! A dataset directory holds one little-endian f32 file per sample, a
//! `manifest.txt` with one `file modality rows cols label` line per sample,
//! and `stats.txt` with the dataset statistics record. Labels are `-`,
//! `c:<class>` or `v:<x>,<y>,...`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenInput};
use crate::signalgen::tasks::{Labeled, Target};
use crate::signalgen::{
    compute_iq_stats, compute_spectrogram_stats, gen_iq_scene, gen_spectrogram_scene, preprocess_iq,
    preprocess_spectrogram, random_spectrogram_scene, ChannelSpec, DatasetStats, ImageLikeSample, Interference,
    IqSample, IqSceneConfig, Modality, Modulation, RawSpectrogram,
};
use crate::tokenizer::{patchify, segment};

pub fn tokenize_image(sample: &ImageLikeSample, cfg: &ModelConfig) -> Result<TokenInput> {
    let (c, h, w) = sample.dims();
    if (c, h, w) != (cfg.channels, cfg.image_height, cfg.image_width) {
        return Err(Error::Shape(format!(
            "image {c}x{h}x{w} does not match model input {}x{}x{}",
            cfg.channels, cfg.image_height, cfg.image_width
        )));
    }
    Ok(TokenInput::Image(patchify(sample, cfg.backbone.patch)?))
}

pub fn tokenize_iq(sample: &IqSample, cfg: &ModelConfig) -> Result<TokenInput> {
    if sample.data.dim() != (cfg.n_antennas, cfg.n_scalars) {
        return Err(Error::Shape(format!(
            "IQ capture {:?} does not match model input ({}, {})",
            sample.data.dim(),
            cfg.n_antennas,
            cfg.n_scalars
        )));
    }
    Ok(TokenInput::Iq(segment(sample, cfg.backbone.segment)?))
}

/// Raw unlabeled spectrograms at the model's image size.
pub fn raw_spectrogram_corpus(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<RawSpectrogram>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = random_spectrogram_scene(cfg.image_height, cfg.image_width, &mut rng);
            gen_spectrogram_scene(&scene, rng.random())
        })
        .collect()
}

/// Raw unlabeled IQ captures: random modulation, channel, SNR, and an
/// occasional interferer.
pub fn raw_iq_corpus(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<IqSample>> {
    let mods = [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    (0..count)
        .map(|_| {
            let mut scene = IqSceneConfig::new(mods[rng.random_range(0..mods.len())], cfg.n_antennas, cfg.n_scalars);
            scene.segment_size = cfg.backbone.segment;
            scene.channel = ChannelSpec::Random { seed: rng.random(), max_delay: 4, min_gain_db: -12.0 };
            scene.snr_db = Some(rng.random_range(0.0..20.0));
            if rng.random_bool(0.25) {
                scene.interference = Some(Interference {
                    power_db: rng.random_range(-6.0..3.0),
                    samples_per_chip: rng.random_range(1..=2),
                    freq_offset: rng.random_range(-0.25..0.25),
                });
            }
            gen_iq_scene(&scene, rng.random())
        })
        .collect()
}

/// Preprocessed, tokenized pretraining data for both modalities.
#[derive(Debug, Clone)]
pub struct PretrainCorpus {
    pub image: Vec<TokenInput>,
    pub iq: Vec<TokenInput>,
    pub image_stats: DatasetStats,
    pub iq_stats: DatasetStats,
}

impl PretrainCorpus {
    pub fn from_raw(cfg: &ModelConfig, spectrograms: &[RawSpectrogram], iq: &[IqSample]) -> Result<Self> {
        let target = (cfg.image_height, cfg.image_width);
        let image_stats = compute_spectrogram_stats(spectrograms, target)?;
        let iq_stats = compute_iq_stats(iq)?;
        let image = spectrograms
            .iter()
            .map(|r| tokenize_image(&preprocess_spectrogram(r, &image_stats, target)?, cfg))
            .collect::<Result<_>>()?;
        let iq = iq.iter().map(|r| tokenize_iq(&preprocess_iq(r, &iq_stats)?, cfg)).collect::<Result<_>>()?;
        Ok(Self { image, iq, image_stats, iq_stats })
    }

    pub fn synthetic(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Self> {
        let spec = raw_spectrogram_corpus(cfg, count, seed)?;
        let iq = raw_iq_corpus(cfg, count, seed)?;
        Self::from_raw(cfg, &spec, &iq)
    }
}

/// Tokenized labeled examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub inputs: Vec<TokenInput>,
    pub targets: Vec<Target>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Standardize with `stats` (computed on the training split) and tokenize.
pub fn iq_task_data(samples: &[Labeled<IqSample>], stats: &DatasetStats, cfg: &ModelConfig) -> Result<TaskData> {
    let inputs = samples.iter().map(|l| tokenize_iq(&preprocess_iq(&l.sample, stats)?, cfg)).collect::<Result<_>>()?;
    Ok(TaskData { inputs, targets: samples.iter().map(|l| l.target.clone()).collect() })
}

pub fn image_task_data(
    samples: &[Labeled<RawSpectrogram>],
    stats: &DatasetStats,
    cfg: &ModelConfig,
) -> Result<TaskData> {
    let target = (cfg.image_height, cfg.image_width);
    let inputs = samples
        .iter()
        .map(|l| tokenize_image(&preprocess_spectrogram(&l.sample, stats, target)?, cfg))
        .collect::<Result<_>>()?;
    Ok(TaskData { inputs, targets: samples.iter().map(|l| l.target.clone()).collect() })
}

pub fn format_label(label: Option<&Target>) -> String {
    match label {
        None => "-".into(),
        Some(Target::Class(c)) => format!("c:{c}"),
        Some(Target::Vector(v)) => {
            format!("v:{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
        }
    }
}

pub fn parse_label(text: &str) -> Result<Option<Target>> {
    let bad = || Error::Dataset(format!("malformed label '{text}'"));
    if text == "-" {
        return Ok(None);
    }
    if let Some(c) = text.strip_prefix("c:") {
        return Ok(Some(Target::Class(c.parse().map_err(|_| bad())?)));
    }
    if let Some(v) = text.strip_prefix("v:") {
        let vals = v.split(',').map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        return Ok(Some(Target::Vector(vals)));
    }
    Err(bad())
}

/// A dataset as stored on disk: raw 2D arrays of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub modality: Modality,
    pub samples: Vec<Array2<f64>>,
    pub labels: Vec<Option<Target>>,
    pub stats: DatasetStats,
}

impl StoredDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        if self.labels.len() != self.samples.len() {
            return Err(Error::Dataset("label count differs from sample count".into()));
        }
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, (s, l)) in self.samples.iter().zip(&self.labels).enumerate() {
            let file = format!("{}_{i:05}.f32", self.modality.tag());
            let bytes: Vec<u8> = s.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            manifest.push_str(&format!(
                "{file} {} {} {} {}\n",
                self.modality.tag(),
                s.nrows(),
                s.ncols(),
                format_label(l.as_ref())
            ));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        fs::write(dir.join("stats.txt"), self.stats.to_record())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let stats = DatasetStats::from_record(&fs::read_to_string(dir.join("stats.txt"))?)?;
        let mut modality = None;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::Dataset(format!("manifest line '{line}' needs 5 fields")));
            }
            let m = Modality::from_tag(f[1]).ok_or_else(|| Error::Dataset(format!("unknown modality '{}'", f[1])))?;
            if *modality.get_or_insert(m) != m {
                return Err(Error::Dataset("dataset mixes modalities".into()));
            }
            let rows: usize = f[2].parse().map_err(|_| Error::Dataset(format!("bad rows in '{line}'")))?;
            let cols: usize = f[3].parse().map_err(|_| Error::Dataset(format!("bad cols in '{line}'")))?;
            let bytes = fs::read(dir.join(f[0]))?;
            if bytes.len() != rows * cols * 4 {
                return Err(Error::Dataset(format!(
                    "{} holds {} bytes, expected {}",
                    f[0],
                    bytes.len(),
                    rows * cols * 4
                )));
            }
            let vals: Vec<f64> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            samples.push(Array2::from_shape_vec((rows, cols), vals).expect("length checked"));
            labels.push(parse_label(f[4])?);
        }
        let modality = modality.ok_or_else(|| Error::Empty(format!("dataset {} is empty", dir.display())))?;
        Ok(Self { modality, samples, labels, stats })
    }

    /// Preprocess with the stored statistics and tokenize.
    pub fn tokenize(&self, cfg: &ModelConfig) -> Result<Vec<TokenInput>> {
        let target = (cfg.image_height, cfg.image_width);
        self.samples
            .iter()
            .map(|s| match self.modality {
                Modality::ImageLike => {
                    let raw = RawSpectrogram { data: s.clone(), center_freq_hz: 0.0, sample_rate_hz: 1.0 };
                    tokenize_image(&preprocess_spectrogram(&raw, &self.stats, target)?, cfg)
                }
                Modality::Iq => tokenize_iq(&preprocess_iq(&IqSample { data: s.clone() }, &self.stats)?, cfg),
            })
            .collect()
    }

    pub fn task_data(&self, cfg: &ModelConfig) -> Result<TaskData> {
        let targets = self
            .labels
            .iter()
            .map(|l| l.clone().ok_or_else(|| Error::Dataset("unlabeled sample in a task dataset".into())))
            .collect::<Result<_>>()?;
        Ok(TaskData { inputs: self.tokenize(cfg)?, targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_has_model_shapes() {
        let cfg = ModelConfig::tiny();
        let c = PretrainCorpus::synthetic(&cfg, 6, 1).unwrap();
        assert_eq!(c.image.len(), 6);
        assert_eq!(c.iq.len(), 6);
        for s in &c.image {
            assert_eq!(s.precursors().dim(), (cfg.n_patches(), cfg.patch_dim()));
        }
        for s in &c.iq {
            assert_eq!(s.precursors().dim(), (cfg.n_segments(), cfg.backbone.segment));
        }
        let again = PretrainCorpus::synthetic(&cfg, 6, 1).unwrap();
        assert_eq!(again.image, c.image);
        assert_eq!(again.iq, c.iq);
    }

    #[test]
    fn labels_roundtrip() {
        for l in [None, Some(Target::Class(3)), Some(Target::Vector(vec![0.25, 0.1]))] {
            assert_eq!(parse_label(&format_label(l.as_ref())).unwrap(), l);
        }
        assert!(parse_label("x:1").is_err());
    }

    #[test]
    fn stored_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = StoredDataset {
            modality: Modality::Iq,
            samples: vec![Array2::from_elem((2, 4), 0.5), Array2::from_elem((2, 4), -1.25)],
            labels: vec![Some(Target::Class(0)), Some(Target::Class(1))],
            stats: DatasetStats { mean: 0.0, std: 1.0, min: -1.25, max: 0.5 },
        };
        ds.write(dir.path()).unwrap();
        assert_eq!(StoredDataset::read(dir.path()).unwrap(), ds);
        fs::write(dir.path().join("iq_00000.f32"), [0u8; 3]).unwrap();
        assert!(StoredDataset::read(dir.path()).is_err());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = ModelConfig::tiny();
        assert!(tokenize_iq(&IqSample { data: Array2::zeros((2, 128)) }, &cfg).is_err());
        assert!(tokenize_image(&ImageLikeSample { data: ndarray::Array3::zeros((1, 16, 32)) }, &cfg).is_err());
    }
}
