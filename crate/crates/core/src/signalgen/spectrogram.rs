use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use super::RawSpectrogram;
use crate::error::{Error, Result};

const MIN_SIDE: usize = 16;

/// Building blocks of a synthetic time-frequency scene. Bins and frames are
/// zero-based; powers are linear.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralPrimitive {
    /// Constant carrier on one bin across all frames.
    Tone { bin: usize, power: f64 },
    /// Linear sweep from `start_bin` to `end_bin` over the frame range.
    Chirp { start_bin: usize, end_bin: usize, start_frame: usize, end_frame: usize, power: f64 },
    /// Flat occupied band, the signature of multicarrier bursts.
    OfdmBurst { center_bin: usize, half_width: usize, start_frame: usize, n_frames: usize, power: f64 },
    /// Single-carrier burst with a sinc-squared spectral skirt.
    ModulatedBurst { center_bin: usize, half_width: usize, start_frame: usize, n_frames: usize, power: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramSceneConfig {
    pub n_bins: usize,
    pub n_frames: usize,
    pub primitives: Vec<SpectralPrimitive>,
    pub noise_floor: f64,
    /// Without noise the floor is the constant `noise_floor` and primitives
    /// are deposited exactly; with noise the floor is exponentially
    /// distributed and primitives fade per cell.
    pub noisy: bool,
    pub center_freq_hz: f64,
    pub sample_rate_hz: f64,
}

impl SpectrogramSceneConfig {
    pub fn new(n_bins: usize, n_frames: usize, primitives: Vec<SpectralPrimitive>) -> Self {
        Self {
            n_bins,
            n_frames,
            primitives,
            noise_floor: 1e-2,
            noisy: true,
            center_freq_hz: 2.4e9,
            sample_rate_hz: 20e6,
        }
    }
}

/// Compose a power map from the configured primitives on top of the floor.
/// Every entry is strictly positive.
pub fn gen_spectrogram_scene(config: &SpectrogramSceneConfig, seed: u64) -> Result<RawSpectrogram> {
    let (f_bins, frames) = (config.n_bins, config.n_frames);
    if f_bins < MIN_SIDE || frames < MIN_SIDE {
        return Err(Error::Config(format!(
            "spectrogram must be at least {MIN_SIDE}x{MIN_SIDE}, got {f_bins}x{frames}"
        )));
    }
    if config.primitives.is_empty() {
        return Err(Error::Config("spectrogram scene has no primitives".into()));
    }
    if !(config.noise_floor > 0.0) {
        return Err(Error::Config("noise floor must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = config.noise_floor;

    let mut data = Array2::from_elem((f_bins, frames), floor);
    if config.noisy {
        for v in data.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            *v = floor * e.max(1e-6);
        }
    }

    let fade = |rng: &mut ChaCha8Rng| if config.noisy { rng.random_range(0.75..1.25) } else { 1.0 };

    for prim in &config.primitives {
        match *prim {
            SpectralPrimitive::Tone { bin, power } => {
                let bin = bin.min(f_bins - 1);
                for l in 0..frames {
                    data[[bin, l]] += power * fade(&mut rng);
                }
            }
            SpectralPrimitive::Chirp { start_bin, end_bin, start_frame, end_frame, power } => {
                let end_frame = end_frame.min(frames - 1);
                let start_frame = start_frame.min(end_frame);
                let span = (end_frame - start_frame).max(1) as f64;
                for l in start_frame..=end_frame {
                    let frac = (l - start_frame) as f64 / span;
                    let pos = start_bin as f64 + (end_bin as f64 - start_bin as f64) * frac;
                    let bin = (pos.round() as usize).min(f_bins - 1);
                    data[[bin, l]] += power * fade(&mut rng);
                    for nb in [bin.wrapping_sub(1), bin + 1] {
                        if nb < f_bins {
                            data[[nb, l]] += 0.25 * power * fade(&mut rng);
                        }
                    }
                }
            }
            SpectralPrimitive::OfdmBurst { center_bin, half_width, start_frame, n_frames, power } => {
                let lo = center_bin.saturating_sub(half_width);
                let hi = (center_bin + half_width).min(f_bins - 1);
                for l in start_frame.min(frames)..(start_frame + n_frames).min(frames) {
                    for f in lo..=hi {
                        data[[f, l]] += power * fade(&mut rng);
                    }
                }
            }
            SpectralPrimitive::ModulatedBurst { center_bin, half_width, start_frame, n_frames, power } => {
                let w = half_width.max(1) as f64;
                let reach = 3 * half_width.max(1);
                let lo = center_bin.saturating_sub(reach);
                let hi = (center_bin + reach).min(f_bins - 1);
                for l in start_frame.min(frames)..(start_frame + n_frames).min(frames) {
                    for f in lo..=hi {
                        let x = (f as f64 - center_bin as f64) / w;
                        let sinc =
                            if x == 0.0 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
                        data[[f, l]] += power * sinc * sinc * fade(&mut rng);
                    }
                }
            }
        }
    }

    Ok(RawSpectrogram { data, center_freq_hz: config.center_freq_hz, sample_rate_hz: config.sample_rate_hz })
}

/// Draw a scene with one to three random primitives, all parameters taken
/// from `rng`.
pub fn random_spectrogram_scene<R: Rng>(n_bins: usize, n_frames: usize, rng: &mut R) -> SpectrogramSceneConfig {
    let count = rng.random_range(1..=3);
    let prims = (0..count).map(|_| random_primitive(rng.random_range(0..4), n_bins, n_frames, rng)).collect();
    let mut cfg = SpectrogramSceneConfig::new(n_bins, n_frames, prims);
    cfg.center_freq_hz = rng.random_range(0.4e9..6.0e9);
    cfg.sample_rate_hz = rng.random_range(10e6..60e6);
    cfg
}

/// A random primitive of the given kind: 0 tone, 1 chirp, 2 OFDM burst,
/// 3 modulated burst.
pub(crate) fn random_primitive<R: Rng>(kind: usize, n_bins: usize, n_frames: usize, rng: &mut R) -> SpectralPrimitive {
    let power = 10f64.powf(rng.random_range(0.0..2.0));
    match kind % 4 {
        0 => SpectralPrimitive::Tone { bin: rng.random_range(0..n_bins), power },
        1 => {
            let start_frame = rng.random_range(0..n_frames / 2);
            SpectralPrimitive::Chirp {
                start_bin: rng.random_range(0..n_bins),
                end_bin: rng.random_range(0..n_bins),
                start_frame,
                end_frame: rng.random_range(start_frame + n_frames / 4..n_frames),
                power,
            }
        }
        2 => {
            let half_width = rng.random_range(n_bins / 16..=n_bins / 4).max(1);
            let n = rng.random_range(n_frames / 8..=n_frames / 2).max(1);
            SpectralPrimitive::OfdmBurst {
                center_bin: rng.random_range(0..n_bins),
                half_width,
                start_frame: rng.random_range(0..n_frames - n),
                n_frames: n,
                power,
            }
        }
        _ => {
            let half_width = rng.random_range(1..=(n_bins / 16).max(1));
            let n = rng.random_range(n_frames / 8..=n_frames / 2).max(1);
            SpectralPrimitive::ModulatedBurst {
                center_bin: rng.random_range(0..n_bins),
                half_width,
                start_frame: rng.random_range(0..n_frames - n),
                n_frames: n,
                power,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_tone_occupies_one_row() {
        let mut cfg = SpectrogramSceneConfig::new(32, 20, vec![SpectralPrimitive::Tone { bin: 5, power: 3.0 }]);
        cfg.noisy = false;
        cfg.noise_floor = 0.5;
        let s = gen_spectrogram_scene(&cfg, 0).unwrap();
        for f in 0..32 {
            for l in 0..20 {
                let expected = if f == 5 { 3.5 } else { 0.5 };
                assert_eq!(s.data[[f, l]], expected);
            }
        }
    }

    #[test]
    fn chirp_argmax_is_monotone_path() {
        let mut cfg = SpectrogramSceneConfig::new(
            64,
            32,
            vec![SpectralPrimitive::Chirp { start_bin: 4, end_bin: 50, start_frame: 0, end_frame: 31, power: 10.0 }],
        );
        cfg.noisy = false;
        let s = gen_spectrogram_scene(&cfg, 1).unwrap();
        let argmax: Vec<usize> = (0..32)
            .map(|l| {
                let col = s.data.column(l);
                (0..64).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap()
            })
            .collect();
        assert_eq!(argmax[0], 4);
        assert_eq!(argmax[31], 50);
        assert!(argmax.windows(2).all(|w| w[0] <= w[1]), "{argmax:?}");
    }

    #[test]
    fn deterministic_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = random_spectrogram_scene(64, 64, &mut rng);
        let a = gen_spectrogram_scene(&cfg, 9).unwrap();
        assert_eq!(a, gen_spectrogram_scene(&cfg, 9).unwrap());
        assert!(a.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_empty_or_small_scenes() {
        let cfg = SpectrogramSceneConfig::new(32, 32, vec![]);
        assert!(matches!(gen_spectrogram_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = SpectrogramSceneConfig::new(8, 32, vec![SpectralPrimitive::Tone { bin: 0, power: 1.0 }]);
        assert!(gen_spectrogram_scene(&cfg, 0).is_err());
    }
}
