//! The shared asymmetric ViT: a wide encoder over visible tokens, a linear
//! bridge to the decoder width, and a narrow decoder over the restored
//! sequence.
//!
//! Neither stack carries positional information of its own, so the encoder
//! is permutation-equivariant and accepts any sequence length.

use ndarray::Axis;
use rand::Rng;

use crate::config::KvConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Mat, Param, Parameterized, StackCache, TransformerStack};

/// Transformer hyperparameters. Defaults are the full-size model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub enc_blocks: usize,
    pub enc_dim: usize,
    pub enc_hidden: usize,
    pub enc_heads: usize,
    pub dec_blocks: usize,
    pub dec_dim: usize,
    pub dec_hidden: usize,
    pub dec_heads: usize,
    pub patch: usize,
    pub segment: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            enc_blocks: 8,
            enc_dim: 256,
            enc_hidden: 1024,
            enc_heads: 8,
            dec_blocks: 4,
            dec_dim: 128,
            dec_hidden: 512,
            dec_heads: 16,
            patch: 16,
            segment: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("enc_blocks", self.enc_blocks),
            ("enc_dim", self.enc_dim),
            ("enc_hidden", self.enc_hidden),
            ("enc_heads", self.enc_heads),
            ("dec_blocks", self.dec_blocks),
            ("dec_dim", self.dec_dim),
            ("dec_hidden", self.dec_hidden),
            ("dec_heads", self.dec_heads),
            ("patch", self.patch),
            ("segment", self.segment),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.enc_dim % self.enc_heads != 0 {
            return Err(Error::Config(format!("enc_dim {} not divisible by {} heads", self.enc_dim, self.enc_heads)));
        }
        if self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config(format!("dec_dim {} not divisible by {} heads", self.dec_dim, self.dec_heads)));
        }
        if self.enc_dim % 4 != 0 || self.dec_dim % 4 != 0 {
            return Err(Error::Config("model widths must be divisible by 4 for 2D positional tables".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig, prefix: &str) {
        kv.set(&join(prefix, "enc_blocks"), self.enc_blocks);
        kv.set(&join(prefix, "enc_dim"), self.enc_dim);
        kv.set(&join(prefix, "enc_hidden"), self.enc_hidden);
        kv.set(&join(prefix, "enc_heads"), self.enc_heads);
        kv.set(&join(prefix, "dec_blocks"), self.dec_blocks);
        kv.set(&join(prefix, "dec_dim"), self.dec_dim);
        kv.set(&join(prefix, "dec_hidden"), self.dec_hidden);
        kv.set(&join(prefix, "dec_heads"), self.dec_heads);
        kv.set(&join(prefix, "patch"), self.patch);
        kv.set(&join(prefix, "segment"), self.segment);
    }

    /// Read fields under `prefix`, falling back to `self` for absent keys.
    pub fn read_kv(&self, kv: &KvConfig, prefix: &str) -> Result<Self> {
        let get = |k: &str, d: usize| kv.get_or(&join(prefix, k), d);
        let cfg = Self {
            enc_blocks: get("enc_blocks", self.enc_blocks)?,
            enc_dim: get("enc_dim", self.enc_dim)?,
            enc_hidden: get("enc_hidden", self.enc_hidden)?,
            enc_heads: get("enc_heads", self.enc_heads)?,
            dec_blocks: get("dec_blocks", self.dec_blocks)?,
            dec_dim: get("dec_dim", self.dec_dim)?,
            dec_hidden: get("dec_hidden", self.dec_hidden)?,
            dec_heads: get("dec_heads", self.dec_heads)?,
            patch: get("patch", self.patch)?,
            segment: get("segment", self.segment)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub encoder: TransformerStack,
    /// Encoder width to decoder width.
    pub bridge: Linear,
    pub decoder: TransformerStack,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        Self {
            encoder: TransformerStack::new(cfg.enc_blocks, cfg.enc_dim, cfg.enc_heads, cfg.enc_hidden, rng),
            bridge: Linear::new(cfg.enc_dim, cfg.dec_dim, rng),
            decoder: TransformerStack::new(cfg.dec_blocks, cfg.dec_dim, cfg.dec_heads, cfg.dec_hidden, rng),
        }
    }

    pub fn encode(&self, visible: &Mat) -> Result<(Mat, StackCache)> {
        self.encoder.forward(visible)
    }

    pub fn project_to_decoder(&self, features: &Mat) -> Result<Mat> {
        self.bridge.forward(features)
    }

    pub fn decode(&self, full: &Mat) -> Result<(Mat, StackCache)> {
        self.decoder.forward(full)
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.bridge.visit_params(&join(prefix, "bridge.proj"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.bridge.visit_params_mut(&join(prefix, "bridge.proj"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

/// Token-mean pooling into a single `1 x D` representation.
pub fn pool(features: &Mat) -> Result<Mat> {
    if features.nrows() == 0 {
        return Err(shape_err("cannot pool an empty sequence"));
    }
    Ok(features.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0)))
}

/// Gradient of [`pool`]: every token receives `dz / n`.
pub fn pool_backward(dz: &Mat, n_tokens: usize) -> Mat {
    let row = dz / n_tokens as f64;
    Mat::from_shape_fn((n_tokens, row.ncols()), |(_, j)| row[[0, j]])
}

/// Exact parameter count of one pre-norm block of width `d` and MLP width
/// `hidden`: q/k/v/out projections, two norms, two MLP layers.
pub fn block_param_count(d: usize, hidden: usize) -> usize {
    let attn = 4 * (d * d + d);
    let norms = 2 * 2 * d;
    let mlp = d * hidden + hidden + hidden * d + d;
    attn + norms + mlp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_size_block_counts() {
        assert_eq!(block_param_count(256, 1024), 789_760);
        assert_eq!(block_param_count(128, 512), 198_272);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&BackboneConfig::default(), &mut rng);
        assert_eq!(bb.encoder.num_params(), 6_318_592);
        assert_eq!(bb.decoder.num_params(), 793_344);
        assert_eq!(bb.decoder.blocks.iter().map(|b| b.num_params()).sum::<usize>(), 793_088);
        assert_eq!(bb.encoder.blocks[0].num_params(), 789_760);
    }

    #[test]
    fn encoder_accepts_any_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            enc_blocks: 1,
            enc_dim: 16,
            enc_hidden: 32,
            enc_heads: 4,
            dec_blocks: 1,
            dec_dim: 8,
            dec_hidden: 16,
            dec_heads: 2,
            ..Default::default()
        };
        let bb = Backbone::new(&cfg, &mut rng);
        for n in [1, 59, 77] {
            let (y, _) = bb.encode(&rand_mat(n, 16, &mut rng)).unwrap();
            assert_eq!(y.dim(), (n, 16));
            assert!(y.iter().all(|v| v.is_finite()));
        }
        let (y, _) = bb.decode(&rand_mat(196, 8, &mut rng)).unwrap();
        assert_eq!(y.dim(), (196, 8));
        assert!(bb.encode(&rand_mat(3, 8, &mut rng)).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BackboneConfig { enc_blocks: 2, enc_dim: 16, enc_hidden: 32, enc_heads: 4, ..Default::default() };
        let bb = Backbone::new(&cfg, &mut rng);
        let x = rand_mat(6, 16, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = x.select(Axis(0), &perm);
        let (y, _) = bb.encode(&x).unwrap();
        let (yp, _) = bb.encode(&xp).unwrap();
        let expected = y.select(Axis(0), &perm);
        for (a, b) in yp.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bridge_matches_explicit_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(&BackboneConfig::default(), &mut rng);
        let x = rand_mat(3, 256, &mut rng);
        let y = bb.project_to_decoder(&x).unwrap();
        assert_eq!(y.dim(), (3, 128));
        for i in 0..3 {
            for j in [0, 77, 127] {
                let mut acc = bb.bridge.bias.value[[0, j]];
                for k in 0..256 {
                    acc += x[[i, k]] * bb.bridge.weight.value[[k, j]];
                }
                assert!((acc - y[[i, j]]).abs() < 1e-12);
            }
        }
        let mut zero = bb.bridge.clone();
        zero.weight.value.fill(0.0);
        assert!(zero.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_bridge_passes_through() {
        let bridge = Linear { weight: Param::new(Mat::eye(2)), bias: Param::zeros(1, 2) };
        let x = ndarray::array![[1.5, -2.0]];
        assert_eq!(bridge.forward(&x).unwrap(), x);
    }

    #[test]
    fn pool_is_token_mean() {
        let u = ndarray::array![[1.0, -2.0, 3.0]];
        assert_eq!(pool(&u).unwrap(), u);
        let pair = ndarray::array![[1.0, -2.0], [-1.0, 2.0]];
        assert_eq!(pool(&pair).unwrap(), ndarray::array![[0.0, 0.0]]);
        let three = ndarray::array![[1.0, 2.0], [3.0, 5.0], [5.0, 11.0]];
        assert_eq!(pool(&three).unwrap(), ndarray::array![[3.0, 6.0]]);
        assert!(pool(&Mat::zeros((0, 2))).is_err());
        assert_eq!(pool_backward(&ndarray::array![[3.0, 6.0]], 3), Mat::from_shape_fn((3, 2), |(_, j)| [1.0, 2.0][j]));
    }

    #[test]
    fn single_threaded_evaluation_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BackboneConfig { enc_blocks: 2, enc_dim: 16, enc_hidden: 32, enc_heads: 4, ..Default::default() };
        let bb = Backbone::new(&cfg, &mut rng);
        let x = rand_mat(7, 16, &mut rng);
        assert_eq!(bb.encode(&x).unwrap().0, bb.encode(&x).unwrap().0);
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig { enc_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
        let mut kv = KvConfig::new();
        BackboneConfig::default().write_kv(&mut kv, "model");
        assert_eq!(BackboneConfig::default().read_kv(&kv, "model").unwrap(), BackboneConfig::default());
    }
}
