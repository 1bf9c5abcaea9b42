//! Random token masking and decoder-side restoration.

use ndarray::Axis;
use rand::seq::index;

use crate::embedding::TokenSequence;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Mat, Param};
use crate::rng::rng_for;

/// Which tokens the encoder sees.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub n_total: usize,
    /// Visible indices, ascending.
    pub kept: Vec<usize>,
    /// Masked indices, ascending.
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    /// Everything visible.
    pub fn none(n_total: usize) -> Self {
        Self { n_total, kept: (0..n_total).collect(), masked: Vec::new(), ratio: 0.0 }
    }

    /// Build a plan from an explicit masked set.
    pub fn from_masked(n_total: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_total];
        for &i in masked {
            if i >= n_total || flags[i] {
                return Err(Error::OutOfRange(format!("bad masked index {i} for {n_total} tokens")));
            }
            flags[i] = true;
        }
        if masked.len() == n_total {
            return Err(Error::OutOfRange("mask would hide every token".into()));
        }
        let kept = (0..n_total).filter(|&i| !flags[i]).collect();
        let mut masked = masked.to_vec();
        masked.sort_unstable();
        Ok(Self { n_total, kept, ratio: masked.len() as f64 / n_total as f64, masked })
    }

    pub fn n_visible(&self) -> usize {
        self.kept.len()
    }
}

/// `floor(ratio * n)`. The tiny offset keeps products such as `0.29 * 100`
/// from rounding down past an exact integer.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    ((ratio * n_tokens as f64) + 1e-9).floor() as usize
}

/// Visible token count `n - floor(ratio * n)`.
pub fn visible_count(n_tokens: usize, ratio: f64) -> usize {
    n_tokens - masked_count(n_tokens, ratio)
}

/// Uniformly choose `floor(ratio * n)` tokens to mask, without replacement.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::OutOfRange(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if n_tokens == 0 {
        return Err(Error::Empty("cannot mask an empty sequence".into()));
    }
    let k = masked_count(n_tokens, ratio);
    let mut rng = rng_for(seed, &[]);
    let mut flags = vec![false; n_tokens];
    for i in index::sample(&mut rng, n_tokens, k) {
        flags[i] = true;
    }
    let (masked, kept): (Vec<usize>, Vec<usize>) = (0..n_tokens).partition(|&i| flags[i]);
    Ok(MaskPlan { n_total: n_tokens, kept, masked, ratio })
}

/// Keep only the visible tokens, in their original relative order.
pub fn apply_mask(tokens: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    if tokens.len() != plan.n_total {
        return Err(shape_err(format!("plan covers {} tokens, sequence has {}", plan.n_total, tokens.len())));
    }
    Ok(TokenSequence {
        tokens: tokens.tokens.select(Axis(0), &plan.kept),
        positions: plan.kept.iter().map(|&i| tokens.positions[i]).collect(),
        antennas: tokens.antennas.as_ref().map(|a| plan.kept.iter().map(|&i| a[i]).collect()),
        modality: tokens.modality,
    })
}

/// The single learnable vector placed at every masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskToken(pub Param);

/// Scatter visible features back to their positions, fill masked positions
/// with the mask token, then add the positional table.
pub fn restore(visible: &Mat, plan: &MaskPlan, mask_token: &MaskToken, pos: &Mat) -> Result<Mat> {
    let d = mask_token.0.value.ncols();
    if visible.nrows() != plan.kept.len() || visible.ncols() != d {
        return Err(shape_err(format!(
            "visible features {:?} do not match plan ({} kept, width {d})",
            visible.dim(),
            plan.kept.len()
        )));
    }
    if pos.dim() != (plan.n_total, d) {
        return Err(shape_err(format!("positional table {:?} for {} tokens", pos.dim(), plan.n_total)));
    }
    let mut full = pos.clone();
    for (row, &i) in plan.kept.iter().enumerate() {
        let mut dst = full.row_mut(i);
        dst += &visible.row(row);
    }
    let token = mask_token.0.value.row(0);
    for &i in &plan.masked {
        let mut dst = full.row_mut(i);
        dst += &token;
    }
    Ok(full)
}

/// Split `d loss / d restored` into the visible-feature gradient and the
/// mask-token gradient.
pub fn restore_backward(dfull: &Mat, plan: &MaskPlan) -> (Mat, Mat) {
    let dvisible = dfull.select(Axis(0), &plan.kept);
    let dtoken = dfull.select(Axis(0), &plan.masked).sum_axis(Axis(0)).insert_axis(Axis(0));
    (dvisible, dtoken)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalgen::Modality;
    use ndarray::array;

    fn seq(n: usize) -> TokenSequence {
        TokenSequence {
            tokens: Mat::from_shape_fn((n, 2), |(i, j)| (i * 10 + j) as f64),
            positions: (0..n).collect(),
            antennas: None,
            modality: Modality::ImageLike,
        }
    }

    #[test]
    fn visible_counts() {
        assert_eq!(visible_count(196, 0.7), 59);
        assert_eq!(visible_count(256, 0.7), 77);
        assert_eq!(sample_mask(196, 0.7, 1).unwrap().n_visible(), 59);
        assert_eq!(sample_mask(256, 0.7, 1).unwrap().n_visible(), 77);
        assert_eq!(masked_count(100, 0.29), 29);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let plan = sample_mask(12, 0.0, 3).unwrap();
        assert!(plan.masked.is_empty());
        assert_eq!(plan.kept, (0..12).collect::<Vec<_>>());
        let s = seq(12);
        assert_eq!(apply_mask(&s, &plan).unwrap(), s);
    }

    #[test]
    fn invalid_ratios() {
        assert!(sample_mask(10, 1.0, 0).is_err());
        assert!(sample_mask(10, -0.1, 0).is_err());
        assert!(sample_mask(0, 0.5, 0).is_err());
    }

    #[test]
    fn plans_partition_and_are_deterministic() {
        for seed in 0..50 {
            let p = sample_mask(37, 0.6, seed).unwrap();
            assert_eq!(p.kept.len() + p.masked.len(), 37);
            let mut all: Vec<_> = p.kept.iter().chain(&p.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert!(p.kept.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(p, sample_mask(37, 0.6, seed).unwrap());
        }
    }

    #[test]
    fn apply_mask_selects_rows() {
        let plan = MaskPlan::from_masked(4, &[1, 3]).unwrap();
        let out = apply_mask(&seq(4), &plan).unwrap();
        assert_eq!(out.tokens, array![[0.0, 1.0], [20.0, 21.0]]);
        assert_eq!(out.positions, vec![0, 2]);
        assert!(apply_mask(&seq(5), &plan).is_err());
    }

    #[test]
    fn restore_places_rows_by_index() {
        // 3 tokens, keep {1}, mask {0, 2}
        let plan = MaskPlan::from_masked(3, &[0, 2]).unwrap();
        let visible = array![[5.0, 6.0]];
        let token = MaskToken(Param::new(array![[-1.0, 1.0]]));
        let pos = array![[0.0, 0.1], [0.2, 0.3], [0.4, 0.5]];
        let full = restore(&visible, &plan, &token, &pos).unwrap();
        assert_eq!(full, array![[-1.0, 1.1], [5.2, 6.3], [-0.6, 1.5]]);
        let (dv, dt) = restore_backward(&Mat::ones((3, 2)), &plan);
        assert_eq!(dv, array![[1.0, 1.0]]);
        assert_eq!(dt, array![[2.0, 2.0]]);
    }

    #[test]
    fn restore_without_masking_adds_pos() {
        let plan = MaskPlan::none(2);
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        let pos = array![[0.5, 0.5], [1.0, 1.0]];
        let token = MaskToken(Param::zeros(1, 2));
        assert_eq!(restore(&v, &plan, &token, &pos).unwrap(), &v + &pos);
    }

    #[test]
    fn scatter_then_gather_is_identity() {
        let plan = sample_mask(20, 0.5, 9).unwrap();
        let v = Mat::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let token = MaskToken(Param::ones(1, 3));
        let full = restore(&v, &plan, &token, &Mat::zeros((20, 3))).unwrap();
        assert_eq!(full.select(Axis(0), &plan.kept), v);
        assert!(restore(&v, &plan, &token, &Mat::zeros((19, 3))).is_err());
    }

    #[test]
    fn per_index_frequency_is_uniform() {
        let mut hits = [0usize; 10];
        for seed in 0..10_000 {
            for i in sample_mask(10, 0.5, seed).unwrap().masked {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((f - 0.5).abs() <= 0.02, "{f}");
        }
    }
}
