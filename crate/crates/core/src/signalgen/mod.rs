//! Synthetic wireless data for both input families plus the preprocessing
//! pipelines applied before tokenization.
//!
//! Two families are produced:
//! - image-like: time-frequency power maps built from tones, chirps and
//!   burst primitives ([`gen_spectrogram_scene`]), turned into `C x H x W`
//!   tensors by [`preprocess_spectrogram`];
//! - IQ: multi-antenna baseband streams with per-antenna complex gain,
//!   integer delay and AWGN ([`gen_iq_scene`]), standardized by
//!   [`preprocess_iq`].
//!
//! IQ matrices interleave in-phase and quadrature scalars along the time
//! axis: even columns hold I, odd columns hold Q.

mod iq;
mod preprocess;
mod spectrogram;
pub mod tasks;

use ndarray::{Array2, Array3};

pub use iq::{gen_iq_scene, AntennaPath, ChannelSpec, Interference, IqSceneConfig, Modulation, PulseShape};
pub use preprocess::{
    compute_iq_stats, compute_spectrogram_stats, compute_stats, log_normalize, preprocess_iq, preprocess_spectrogram,
    resize_bilinear, LOG_EPSILON,
};
pub use spectrogram::{gen_spectrogram_scene, random_spectrogram_scene, SpectralPrimitive, SpectrogramSceneConfig};

/// The two input families handled by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    ImageLike,
    Iq,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::ImageLike => "image",
            Modality::Iq => "iq",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "image" | "image-like" => Some(Modality::ImageLike),
            "iq" => Some(Modality::Iq),
            _ => None,
        }
    }

    pub(crate) fn index(self) -> u64 {
        match self {
            Modality::ImageLike => 0,
            Modality::Iq => 1,
        }
    }
}

/// Time-frequency power map: rows are frequency bins, columns time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpectrogram {
    pub data: Array2<f64>,
    pub center_freq_hz: f64,
    pub sample_rate_hz: f64,
}

/// A `C x H x W` real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLikeSample {
    pub data: Array3<f64>,
}

impl ImageLikeSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// An `M x T` real matrix, I/Q interleaved per antenna row.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSample {
    pub data: Array2<f64>,
}

impl IqSample {
    pub fn n_antennas(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Dataset-wide scalar statistics for one modality.
///
/// For spectrograms `min`/`max` are taken after the log step and
/// `mean`/`std` after normalization and resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl DatasetStats {
    pub fn is_degenerate(&self) -> bool {
        !(self.std > 0.0) || !(self.max > self.min)
    }

    /// Single-line `mean std min max` record.
    pub fn to_record(&self) -> String {
        format!("{} {} {} {}\n", self.mean, self.std, self.min, self.max)
    }

    pub fn from_record(text: &str) -> crate::Result<Self> {
        let fields: Vec<f64> = text
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| crate::Error::Dataset(format!("bad stats record: {e}")))?;
        match fields[..] {
            [mean, std, min, max] => Ok(Self { mean, std, min, max }),
            _ => Err(crate::Error::Dataset(format!("stats record needs 4 fields, found {}", fields.len()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_record_roundtrips_exactly() {
        let s = DatasetStats { mean: 0.1 + 0.2, std: 1.0 / 3.0, min: -1e-300, max: 7.5 };
        assert_eq!(DatasetStats::from_record(&s.to_record()).unwrap(), s);
        assert!(DatasetStats::from_record("1 2 3").is_err());
    }

    #[test]
    fn degenerate_flags() {
        let s = DatasetStats { mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
        assert!(s.is_degenerate());
        let s = DatasetStats { mean: 0.0, std: 1.0, min: 0.0, max: 1.0 };
        assert!(!s.is_degenerate());
    }
}
