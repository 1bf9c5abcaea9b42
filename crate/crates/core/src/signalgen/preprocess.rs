use ndarray::{Array2, Axis};

use super::{DatasetStats, ImageLikeSample, IqSample, RawSpectrogram};
use crate::error::{Error, Result};

/// Offset inside the log step guarding zero-power bins.
pub const LOG_EPSILON: f64 = 1e-12;

/// Shifted-data accumulator: sums of `x - shift` and its square, with the
/// first value as shift.
#[derive(Default)]
struct Running {
    n: u64,
    shift: f64,
    sum: f64,
    sum_sq: f64,
    min: f64,
    max: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        if self.n == 0 {
            self.shift = x;
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.n += 1;
        let d = x - self.shift;
        self.sum += d;
        self.sum_sq += d * d;
    }

    fn mean(&self) -> f64 {
        self.shift + self.sum / self.n as f64
    }

    fn std(&self) -> f64 {
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / n).max(0.0).sqrt()
    }
}

/// Population mean/std/min/max over every element of every sample.
///
/// An all-constant corpus yields `std == 0`; callers detect that through
/// [`DatasetStats::is_degenerate`] and preprocessing refuses such stats.
pub fn compute_stats<I, S>(corpus: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = f64>,
{
    let mut acc = Running::default();
    for sample in corpus {
        for x in sample {
            acc.push(x);
        }
    }
    if acc.n == 0 {
        return Err(Error::Empty("cannot compute statistics of an empty corpus".into()));
    }
    Ok(DatasetStats { mean: acc.mean(), std: acc.std(), min: acc.min, max: acc.max })
}

pub fn compute_iq_stats(corpus: &[IqSample]) -> Result<DatasetStats> {
    compute_stats(corpus.iter().map(|s| s.data.iter().copied()))
}

/// Statistics for the spectrogram pipeline: `min`/`max` of the log-power
/// values, `mean`/`std` of the normalized and resized maps.
pub fn compute_spectrogram_stats(corpus: &[RawSpectrogram], target: (usize, usize)) -> Result<DatasetStats> {
    let logs = compute_stats(corpus.iter().map(|s| s.data.iter().map(|&v| (v + LOG_EPSILON).ln())))?;
    if !(logs.max > logs.min) {
        return Err(Error::DegenerateStats("log-power range is empty".into()));
    }
    let resized: Vec<Array2<f64>> = corpus
        .iter()
        .map(|s| resize_bilinear(&log_normalize(&s.data, logs.min, logs.max), target.0, target.1))
        .collect::<Result<_>>()?;
    let post = compute_stats(resized.iter().map(|a| a.iter().copied()))?;
    Ok(DatasetStats { mean: post.mean, std: post.std, min: logs.min, max: logs.max })
}

/// Steps 1-2 of the spectrogram pipeline: `log(x + eps)` then min-max
/// normalization with the dataset range, clamped to `[0, 1]`.
pub fn log_normalize(data: &Array2<f64>, min: f64, max: f64) -> Array2<f64> {
    let range = max - min;
    data.mapv(|v| (((v + LOG_EPSILON).ln() - min) / range).clamp(0.0, 1.0))
}

/// Bilinear resampling with half-pixel centers. Same-size input is returned
/// unchanged.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (in_h, in_w) = src.dim();
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize {in_h}x{in_w} to {out_h}x{out_w}")));
    }
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, in_h);
    let xs = coords(out_w, in_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (r, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (c, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[r, c]] = top * (1.0 - wy) + bot * wy;
        }
    }
    Ok(out)
}

fn check_stats(stats: &DatasetStats) -> Result<()> {
    if !(stats.std > 0.0) {
        return Err(Error::DegenerateStats(format!("std = {}", stats.std)));
    }
    Ok(())
}

/// Log scale, normalize to `[0, 1]`, resize to `target`, standardize.
/// Output is a single-channel image.
pub fn preprocess_spectrogram(
    raw: &RawSpectrogram,
    stats: &DatasetStats,
    target: (usize, usize),
) -> Result<ImageLikeSample> {
    check_stats(stats)?;
    if !(stats.max > stats.min) {
        return Err(Error::DegenerateStats(format!("max {} <= min {}", stats.max, stats.min)));
    }
    if raw.data.iter().any(|&v| v < 0.0) {
        return Err(Error::OutOfRange("spectrogram power must be non-negative".into()));
    }
    let normalized = log_normalize(&raw.data, stats.min, stats.max);
    let resized = resize_bilinear(&normalized, target.0, target.1)?;
    let standardized = resized.mapv(|v| (v - stats.mean) / stats.std);
    Ok(ImageLikeSample { data: standardized.insert_axis(Axis(0)) })
}

/// Elementwise `(x - mean) / std` with dataset-wide scalars.
pub fn preprocess_iq(raw: &IqSample, stats: &DatasetStats) -> Result<IqSample> {
    check_stats(stats)?;
    Ok(IqSample { data: raw.data.mapv(|v| (v - stats.mean) / stats.std) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(data: Array2<f64>) -> RawSpectrogram {
        RawSpectrogram { data, center_freq_hz: 0.0, sample_rate_hz: 1.0 }
    }

    #[test]
    fn two_by_two_pipeline_matches_hand_values() {
        // log -> {~0, 1, 2, 3}; /3 -> {0, 1/3, 2/3, 1}; (x - 0.5)/0.25.
        let e = std::f64::consts::E;
        let r = raw(array![[1.0, e], [e * e, e * e * e]]);
        let stats = DatasetStats { mean: 0.5, std: 0.25, min: 0.0, max: 3.0 };
        let out = preprocess_spectrogram(&r, &stats, (2, 2)).unwrap();
        let expected = [-2.0, -2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (got, want) in out.data.iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert_eq!(out.dims(), (1, 2, 2));
    }

    #[test]
    fn mean_valued_input_standardizes_to_zero() {
        // constant map whose normalized value is exactly the dataset mean
        let stats = DatasetStats { mean: 0.5, std: 0.1, min: 0.0, max: 2.0 };
        let v = 1f64.exp() - LOG_EPSILON;
        let out = preprocess_spectrogram(&raw(Array2::from_elem((20, 20), v)), &stats, (8, 8)).unwrap();
        assert!(out.data.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((24, 24), |_| rng.random::<f64>());
        assert_eq!(resize_bilinear(&a, 24, 24).unwrap(), a);
    }

    #[test]
    fn resize_preserves_elementwise_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((17, 23), |_| rng.random::<f64>());
        let b = &a + &Array2::from_shape_fn((17, 23), |_| rng.random::<f64>() * 0.1 + 1e-3);
        let ra = resize_bilinear(&a, 32, 9).unwrap();
        let rb = resize_bilinear(&b, 32, 9).unwrap();
        assert!(ra.iter().zip(rb.iter()).all(|(x, y)| y >= x));
    }

    #[test]
    fn stats_of_zero_and_one_matrices() {
        let corpus = [Array2::<f64>::zeros((3, 4)), Array2::<f64>::ones((3, 4))];
        let s = compute_stats(corpus.iter().map(|a| a.iter().copied())).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (0.5, 0.5, 0.0, 1.0));
        let rev = compute_stats(corpus.iter().rev().map(|a| a.iter().copied())).unwrap();
        assert_eq!(s, rev);
    }

    #[test]
    fn single_zero_sample_is_flagged_degenerate() {
        let corpus = [Array2::<f64>::zeros((2, 2))];
        let s = compute_stats(corpus.iter().map(|a| a.iter().copied())).unwrap();
        assert_eq!((s.mean, s.min, s.max), (0.0, 0.0, 0.0));
        assert!(s.is_degenerate());
        let x = IqSample { data: Array2::zeros((1, 4)) };
        assert!(matches!(preprocess_iq(&x, &s), Err(Error::DegenerateStats(_))));
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(compute_iq_stats(&[]).is_err());
    }

    #[test]
    fn iq_formula_and_mean_input() {
        let stats = DatasetStats { mean: 0.0, std: 2.0, min: -1.0, max: 1.0 };
        let out = preprocess_iq(&IqSample { data: array![[4.0, -2.0]] }, &stats).unwrap();
        assert_eq!(out.data, array![[2.0, -1.0]]);
        let stats = DatasetStats { mean: 1.5, std: 2.0, min: -1.0, max: 3.0 };
        let out = preprocess_iq(&IqSample { data: Array2::from_elem((2, 8), 1.5) }, &stats).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_iq_corpus_has_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<IqSample> = (0..100)
            .map(|_| IqSample { data: Array2::from_shape_fn((4, 64), |_| rng.random_range(-3.0..5.0)) })
            .collect();
        let stats = compute_iq_stats(&corpus).unwrap();
        let out: Vec<IqSample> = corpus.iter().map(|s| preprocess_iq(s, &stats).unwrap()).collect();
        let after = compute_iq_stats(&out).unwrap();
        assert!(after.mean.abs() < 1e-6);
        assert!((after.std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spectrogram_corpus_stats_standardize_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<RawSpectrogram> =
            (0..6).map(|_| raw(Array2::from_shape_fn((20, 30), |_| rng.random_range(0.0..10.0)))).collect();
        let stats = compute_spectrogram_stats(&corpus, (16, 16)).unwrap();
        let imgs: Vec<ImageLikeSample> =
            corpus.iter().map(|r| preprocess_spectrogram(r, &stats, (16, 16)).unwrap()).collect();
        let after = compute_stats(imgs.iter().map(|s| s.data.iter().copied())).unwrap();
        assert!(after.mean.abs() < 1e-9);
        assert!((after.std - 1.0).abs() < 1e-9);
        // step-2 output stays in the unit interval
        let n = log_normalize(&corpus[0].data, stats.min, stats.max);
        assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
