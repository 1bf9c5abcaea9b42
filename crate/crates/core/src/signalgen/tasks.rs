//! Labeled synthetic datasets standing in for downstream wireless tasks.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use super::spectrogram::random_primitive;
use super::{
    gen_iq_scene, gen_spectrogram_scene, ChannelSpec, Interference, IqSample, IqSceneConfig, Modulation,
    RawSpectrogram, SpectrogramSceneConfig,
};
use crate::error::Result;
use crate::rng::derive_seed;

/// Supervision target of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<T> {
    pub sample: T,
    pub target: Target,
}

const MODULATIONS: [Modulation; 3] = [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16];

/// Transmitter identification from per-antenna channel signatures.
///
/// Each class is one emitter whose gain/delay profile across the array is
/// fixed (drawn from `device_seed`); every capture draws a random
/// modulation and symbols, jitters the gains, and adds noise.
#[derive(Debug, Clone)]
pub struct FingerprintTask {
    pub n_classes: usize,
    pub n_antennas: usize,
    pub n_scalars: usize,
    pub snr_db: f64,
    /// Relative standard deviation of per-capture complex gain jitter.
    pub gain_jitter: f64,
    pub max_delay: usize,
    pub device_seed: u64,
}

impl FingerprintTask {
    pub fn new(n_classes: usize, n_antennas: usize, n_scalars: usize) -> Self {
        Self { n_classes, n_antennas, n_scalars, snr_db: 10.0, gain_jitter: 0.3, max_delay: 3, device_seed: 0xF1 }
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<Labeled<IqSample>>> {
        let devices: Vec<_> = (0..self.n_classes)
            .map(|c| {
                ChannelSpec::Random {
                    seed: derive_seed(self.device_seed, &[c as u64]),
                    max_delay: self.max_delay,
                    min_gain_db: -12.0,
                }
                .realize(self.n_antennas)
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let class = i % self.n_classes;
                let mut paths = devices[class].clone();
                let common = Complex64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
                for p in &mut paths {
                    let j = Complex64::new(
                        1.0 + self.gain_jitter * rng.random_range(-1.0..1.0),
                        self.gain_jitter * rng.random_range(-1.0..1.0),
                    );
                    p.gain *= j * common;
                }
                let mut cfg = IqSceneConfig::new(
                    MODULATIONS[rng.random_range(0..MODULATIONS.len())],
                    self.n_antennas,
                    self.n_scalars,
                );
                cfg.channel = ChannelSpec::Explicit(paths);
                cfg.snr_db = Some(self.snr_db);
                cfg.segment_size = 1;
                let sample = gen_iq_scene(&cfg, rng.random())?;
                Ok(Labeled { sample, target: Target::Class(class) })
            })
            .collect()
    }
}

/// Binary interference detection: half of the captures carry a DSSS
/// interferer at a random power and carrier offset.
pub fn interference_task(
    count: usize,
    n_antennas: usize,
    n_scalars: usize,
    seed: u64,
) -> Result<Vec<Labeled<IqSample>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let present = i % 2 == 1;
            let mut cfg =
                IqSceneConfig::new(MODULATIONS[rng.random_range(0..MODULATIONS.len())], n_antennas, n_scalars);
            cfg.channel = ChannelSpec::Random { seed: rng.random(), max_delay: 4, min_gain_db: -6.0 };
            cfg.snr_db = Some(rng.random_range(5.0..20.0));
            cfg.segment_size = 1;
            if present {
                cfg.interference = Some(Interference {
                    power_db: rng.random_range(-6.0..3.0),
                    samples_per_chip: rng.random_range(1..=2),
                    freq_offset: rng.random_range(-0.25..0.25),
                });
            }
            let sample = gen_iq_scene(&cfg, rng.random())?;
            Ok(Labeled { sample, target: Target::Class(present as usize) })
        })
        .collect()
}

/// Signal-type classification: each spectrogram holds one primitive of the
/// labeled kind (tone, chirp, OFDM burst, modulated burst).
pub fn signal_type_task(
    count: usize,
    n_bins: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<Labeled<RawSpectrogram>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = i % 4;
            let prim = random_primitive(kind, n_bins, n_frames, &mut rng);
            let cfg = SpectrogramSceneConfig::new(n_bins, n_frames, vec![prim]);
            let sample = gen_spectrogram_scene(&cfg, rng.random())?;
            Ok(Labeled { sample, target: Target::Class(kind) })
        })
        .collect()
}

/// 2D position regression: a single emitter appears as a Gaussian hot spot
/// whose normalized `(row, col)` location in `[0, 1]^2` is the target.
pub fn position_task(count: usize, side: usize, seed: u64) -> Result<Vec<Labeled<RawSpectrogram>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = side as f64 / 10.0;
    Ok((0..count)
        .map(|_| {
            let (py, px) = (rng.random::<f64>(), rng.random::<f64>());
            let (cy, cx) = (py * (side - 1) as f64, px * (side - 1) as f64);
            let data = Array2::from_shape_fn((side, side), |(r, c)| {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let noise: f64 = Exp1.sample(&mut rng);
                1e-2 * noise.max(1e-6) + 10.0 * (-d2 / (2.0 * width * width)).exp()
            });
            Labeled {
                sample: RawSpectrogram { data, center_freq_hz: 3.5e9, sample_rate_hz: 30.72e6 },
                target: Target::Vector(vec![py, px]),
            }
        })
        .collect())
}
