//! Reconstruction heads, masked reconstruction loss, downstream task losses
//! and evaluation metrics.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Mat, Param, Parameterized};
use crate::signalgen::tasks::Target;
use crate::tokenizer::{PatchSequence, SegmentSequence};

/// Per-modality linear heads from decoder width back to token precursors.
/// These are separate from the input projections and never tied to them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconHeads {
    pub image: Linear,
    pub iq: Linear,
}

impl ReconHeads {
    pub fn new<R: Rng>(dec_dim: usize, patch_dim: usize, segment: usize, rng: &mut R) -> Self {
        Self { image: Linear::new(dec_dim, patch_dim, rng), iq: Linear::new(dec_dim, segment, rng) }
    }
}

impl Parameterized for ReconHeads {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.image.visit_params(&join(prefix, "image"), f);
        self.iq.visit_params(&join(prefix, "iq"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.image.visit_params_mut(&join(prefix, "image"), f);
        self.iq.visit_params_mut(&join(prefix, "iq"), f);
    }
}

/// Decoder output to patches. `grid` and `channels` describe the layout of
/// the resulting sequence.
pub fn reconstruct_image(y: &Mat, heads: &ReconHeads, grid: (usize, usize), channels: usize) -> Result<PatchSequence> {
    let patches = heads.image.forward(y)?;
    let pc = patches.ncols();
    if channels == 0 || pc % channels != 0 {
        return Err(shape_err(format!("head width {pc} not divisible by {channels} channels")));
    }
    let patch = ((pc / channels) as f64).sqrt().round() as usize;
    if patch * patch * channels != pc {
        return Err(shape_err(format!("head width {pc} is not P*P*{channels}")));
    }
    if grid.0 * grid.1 != patches.nrows() {
        return Err(shape_err(format!("grid {grid:?} does not hold {} tokens", patches.nrows())));
    }
    Ok(PatchSequence { patches, grid, patch, channels })
}

/// Decoder output to segments; `antenna_of` is carried through unchanged.
pub fn reconstruct_iq(y: &Mat, heads: &ReconHeads, antenna_of: &[usize]) -> Result<SegmentSequence> {
    let segments = heads.iq.forward(y)?;
    if antenna_of.len() != segments.nrows() {
        return Err(shape_err("antenna list length differs from token count"));
    }
    let segment = segments.ncols();
    Ok(SegmentSequence { segments, antenna_of: antenna_of.to_vec(), segment })
}

/// Mean over masked tokens of the squared token-wise L2 error.
pub fn masked_mse(original: &Mat, recon: &Mat, masked: &[usize]) -> Result<f64> {
    check_masked(original, recon, masked)?;
    let mut total = 0.0;
    for &i in masked {
        total += original.row(i).iter().zip(recon.row(i)).map(|(x, y)| (y - x) * (y - x)).sum::<f64>();
    }
    Ok(total / masked.len() as f64)
}

/// d masked_mse / d recon, scaled by `weight`. Visible rows stay zero.
pub fn masked_mse_grad(original: &Mat, recon: &Mat, masked: &[usize], weight: f64) -> Result<Mat> {
    check_masked(original, recon, masked)?;
    let mut g = Mat::zeros(recon.dim());
    let scale = 2.0 * weight / masked.len() as f64;
    for &i in masked {
        for j in 0..recon.ncols() {
            g[[i, j]] = scale * (recon[[i, j]] - original[[i, j]]);
        }
    }
    Ok(g)
}

fn check_masked(original: &Mat, recon: &Mat, masked: &[usize]) -> Result<()> {
    if masked.is_empty() {
        return Err(Error::Empty("masked set is empty".into()));
    }
    if original.dim() != recon.dim() {
        return Err(shape_err(format!("original {:?} vs recon {:?}", original.dim(), recon.dim())));
    }
    if let Some(&bad) = masked.iter().find(|&&i| i >= original.nrows()) {
        return Err(Error::OutOfRange(format!("masked index {bad} beyond {} tokens", original.nrows())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Loss for one prediction row and its gradient with respect to that row.
/// Cross-entropy over logits, or mean squared error over outputs.
pub fn task_loss_grad(pred: &[f64], target: &Target, kind: TaskKind) -> Result<(f64, Vec<f64>)> {
    match (kind, target) {
        (TaskKind::Classification, Target::Class(label)) => {
            if *label >= pred.len() {
                return Err(Error::OutOfRange(format!("label {label} with {} classes", pred.len())));
            }
            let max = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = pred.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() + max - pred[*label];
            let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
            grad[*label] -= 1.0;
            Ok((loss, grad))
        }
        (TaskKind::Regression, Target::Vector(t)) => {
            if t.len() != pred.len() || t.is_empty() {
                return Err(shape_err(format!("prediction has {} outputs, target {}", pred.len(), t.len())));
            }
            let n = t.len() as f64;
            let loss = pred.iter().zip(t).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
            let grad = pred.iter().zip(t).map(|(p, y)| 2.0 * (p - y) / n).collect();
            Ok((loss, grad))
        }
        _ => Err(Error::Config("target does not match task kind".into())),
    }
}

pub fn task_loss(pred: &[f64], target: &Target, kind: TaskKind) -> Result<f64> {
    task_loss_grad(pred, target, kind).map(|(l, _)| l)
}

/// Per-step pretraining losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    /// Mean per-sample masked MSE over image-like samples in the batch.
    pub loss_image: f64,
    pub loss_iq: f64,
    /// Sum of all per-sample losses divided by the total sample count.
    pub combined: f64,
    pub n_masked_image: usize,
    pub n_masked_iq: usize,
}

/// Unweighted mean of per-class accuracies over classes present in `labels`.
pub fn metric_mean_per_class_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut hits = vec![0usize; n_classes];
    let mut seen = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l < n_classes {
            seen[l] += 1;
            if p == l {
                hits[l] += 1;
            }
        }
    }
    let present: Vec<f64> = (0..n_classes).filter(|&c| seen[c] > 0).map(|c| hits[c] as f64 / seen[c] as f64).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Mean Euclidean distance between paired coordinate vectors.
pub fn metric_mean_localization_error(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no positions to compare".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(shape_err(format!("coordinate dims {} vs {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / pred.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One structured metric line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub step: usize,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task={} metric={} value={} step={}", self.task, self.metric, self.value, self.step)
    }
}

impl MetricRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let mut task = None;
        let mut metric = None;
        let mut value = None;
        let mut step = None;
        for field in line.split_whitespace() {
            let (k, v) =
                field.split_once('=').ok_or_else(|| Error::Config(format!("malformed metric field '{field}'")))?;
            match k {
                "task" => task = Some(v.to_string()),
                "metric" => metric = Some(v.to_string()),
                "value" => value = v.parse().ok(),
                "step" => step = v.parse().ok(),
                _ => {}
            }
        }
        match (task, metric, value, step) {
            (Some(task), Some(metric), Some(value), Some(step)) => Ok(Self { task, metric, value, step }),
            _ => Err(Error::Config(format!("incomplete metric record '{line}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{five_point, rel_err};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_decoder_output_gives_zero_tokens() {
        let mut heads = ReconHeads::new(8, 4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        heads.image.bias.value.fill(0.0);
        heads.iq.bias.value.fill(0.0);
        let y = Mat::zeros((4, 8));
        assert!(reconstruct_image(&y, &heads, (2, 2), 1).unwrap().patches.iter().all(|&v| v == 0.0));
        assert!(reconstruct_iq(&y, &heads, &[0, 0, 1, 1]).unwrap().segments.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_padded_head_passes_through() {
        let mut w = Mat::zeros((6, 4));
        for i in 0..4 {
            w[[i, i]] = 1.0;
        }
        let lin = Linear { weight: Param::new(w), bias: Param::zeros(1, 4) };
        let heads = ReconHeads { image: lin.clone(), iq: lin };
        let y = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        assert_eq!(reconstruct_image(&y, &heads, (1, 1), 1).unwrap().patches, array![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(reconstruct_iq(&y, &heads, &[0]).unwrap().segments, array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn heads_match_explicit_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = ReconHeads::new(128, 256, 16, &mut rng);
        let y = rand_mat(2, 128, &mut rng);
        let img = reconstruct_image(&y, &heads, (1, 2), 1).unwrap();
        let iq = reconstruct_iq(&y, &heads, &[0, 1]).unwrap();
        assert_eq!(img.patch, 16);
        for (lin, out) in [(&heads.image, &img.patches), (&heads.iq, &iq.segments)] {
            for i in 0..2 {
                for j in 0..out.ncols() {
                    let mut acc = lin.bias.value[[0, j]];
                    for k in 0..128 {
                        acc += y[[i, k]] * lin.weight.value[[k, j]];
                    }
                    assert!((acc - out[[i, j]]).abs() < 1e-12);
                }
            }
        }
        assert!(reconstruct_iq(&rand_mat(2, 64, &mut rng), &heads, &[0, 1]).is_err());
        assert!(reconstruct_image(&y, &heads, (2, 2), 1).is_err());
    }

    #[test]
    fn heads_are_separate_from_input_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = crate::embedding::ModalityEmbedder::new(4, 4, 1, 8, &mut rng);
        let mut heads = ReconHeads::new(8, 4, 4, &mut rng);
        let x = rand_mat(3, 4, &mut rng);
        let before = emb.project(crate::signalgen::Modality::Iq, &x).unwrap();
        heads.iq.weight.value.mapv_inplace(|v| v + 1.0);
        assert_eq!(emb.project(crate::signalgen::Modality::Iq, &x).unwrap(), before);
        let y = rand_mat(3, 8, &mut rng);
        let out = reconstruct_iq(&y, &heads, &[0, 0, 0]).unwrap();
        let mut emb2 = emb.clone();
        emb2.iq_proj.weight.value.mapv_inplace(|v| v * 3.0);
        assert_eq!(reconstruct_iq(&y, &heads, &[0, 0, 0]).unwrap(), out);
    }

    #[test]
    fn masked_mse_examples() {
        let x = Mat::zeros((5, 4));
        assert_eq!(masked_mse(&x, &x, &[1, 3]).unwrap(), 0.0);
        let ones = Mat::ones((5, 4));
        assert_eq!(masked_mse(&x, &ones, &[1, 3]).unwrap(), 4.0);
        assert!(masked_mse(&x, &ones, &[]).is_err());
        assert!(masked_mse(&x, &Mat::zeros((4, 4)), &[0]).is_err());
        assert!(masked_mse(&x, &x, &[9]).is_err());
    }

    #[test]
    fn masked_mse_ignores_visible_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(6, 3, &mut rng);
        let mut r = rand_mat(6, 3, &mut rng);
        let before = masked_mse(&x, &r, &[0, 4]).unwrap();
        r.row_mut(2).fill(1e9);
        assert_eq!(masked_mse(&x, &r, &[0, 4]).unwrap().to_bits(), before.to_bits());
    }

    #[test]
    fn masked_mse_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(6, 3, &mut rng);
        let r = rand_mat(6, 3, &mut rng);
        let mu = [1, 2, 5];
        let g = masked_mse_grad(&x, &r, &mu, 1.0).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let mut f = |d: f64| {
                    let mut rp = r.clone();
                    rp[[i, j]] += d;
                    masked_mse(&x, &rp, &mu).unwrap()
                };
                let n = five_point(&mut f, 1e-3);
                if mu.contains(&i) {
                    assert!((g[[i, j]] - 2.0 * (r[[i, j]] - x[[i, j]]) / 3.0).abs() < 1e-15);
                    assert!(rel_err(g[[i, j]], n, 1e-8) < 1e-6);
                } else {
                    // The stencil itself leaves only rounding residue here.
                    assert_eq!(g[[i, j]], 0.0);
                    assert!(n.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn task_loss_examples() {
        let l = task_loss(&[0.3; 4], &Target::Class(2), TaskKind::Classification).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let v = Target::Vector(vec![0.2, 0.7]);
        assert_eq!(task_loss(&[0.2, 0.7], &v, TaskKind::Regression).unwrap(), 0.0);
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 1.0)).ln();
        let l = task_loss(&[2.0, 0.0], &Target::Class(0), TaskKind::Classification).unwrap();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
        assert!(task_loss(&[0.0; 4], &Target::Class(4), TaskKind::Classification).is_err());
        assert!(task_loss(&[0.0; 3], &v, TaskKind::Regression).is_err());
    }

    #[test]
    fn task_loss_grads_match_finite_differences() {
        let logits = [0.4, -1.2, 2.0, 0.1];
        let cases = [
            (Target::Class(1), TaskKind::Classification),
            (Target::Vector(vec![1.0, 0.0, -0.5, 2.0]), TaskKind::Regression),
        ];
        for (t, k) in cases {
            let (_, g) = task_loss_grad(&logits, &t, k).unwrap();
            for i in 0..4 {
                let mut f = |d: f64| {
                    let mut p = logits;
                    p[i] += d;
                    task_loss(&p, &t, k).unwrap()
                };
                assert!(rel_err(g[i], five_point(&mut f, 1e-3), 1e-8) < 1e-7);
            }
        }
    }

    #[test]
    fn cross_entropy_is_class_permutation_equivariant() {
        let logits = [0.4, -1.2, 2.0, 0.1];
        let perm = [2, 0, 3, 1];
        let mut permuted = [0.0; 4];
        for (i, &p) in perm.iter().enumerate() {
            permuted[p] = logits[i];
        }
        for label in 0..4 {
            let a = task_loss(&logits, &Target::Class(label), TaskKind::Classification).unwrap();
            let b = task_loss(&permuted, &Target::Class(perm[label]), TaskKind::Classification).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_per_class_accuracy_examples() {
        assert_eq!(metric_mean_per_class_accuracy(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        let mut labels = vec![0; 10];
        labels.push(1);
        let mut preds = vec![0; 10];
        preds.push(0);
        assert_eq!(metric_mean_per_class_accuracy(&preds, &labels, 2), 0.5);
        // A class with no labels does not drag the mean down.
        assert_eq!(metric_mean_per_class_accuracy(&[0, 1], &[0, 1], 4), 1.0);
    }

    #[test]
    fn chance_accuracy_for_random_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let mut accs = Vec::new();
        for _ in 0..200 {
            let labels: Vec<usize> = (0..400).map(|i| i % n).collect();
            let preds: Vec<usize> = (0..400).map(|_| rng.random_range(0..n)).collect();
            accs.push(metric_mean_per_class_accuracy(&preds, &labels, n));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() < 0.01, "{mean}");
    }

    #[test]
    fn localization_error_examples() {
        let a = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        assert_eq!(metric_mean_localization_error(&a, &a).unwrap(), 0.0);
        assert_eq!(metric_mean_localization_error(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        let p = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let t = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(metric_mean_localization_error(&p, &t).unwrap(), 2.0);
        assert!(metric_mean_localization_error(&p, &[vec![1.0]]).is_err());
        assert!(metric_mean_localization_error(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn metric_record_roundtrip() {
        let r = MetricRecord { task: "fingerprint".into(), metric: "mpca".into(), value: 0.8125, step: 3 };
        assert_eq!(MetricRecord::parse(&r.to_string()).unwrap(), r);
        assert!(MetricRecord::parse("task=x").is_err());
    }
}
