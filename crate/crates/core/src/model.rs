//! The multimodal masked autoencoder: per-modality embedding, shared
//! encoder and decoder, per-modality reconstruction heads.

use ndarray::Axis;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::KvConfig;
use crate::embedding::{EmbedCache, ModalityEmbedder, PositionalTable};
use crate::error::{shape_err, Error, Result};
use crate::masking::{restore, restore_backward, MaskPlan, MaskToken};
use crate::nn::{join, Mat, Param, Parameterized, StackCache, INIT_STD};
use crate::objectives::{masked_mse, masked_mse_grad, ReconHeads};
use crate::rng::{rng_for, TAG_INIT};
use crate::signalgen::Modality;
use crate::tokenizer::{num_patches, num_segments, PatchSequence, SegmentSequence};

/// Full model shape: transformer sizes plus input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub n_antennas: usize,
    /// Interleaved I/Q scalars per antenna.
    pub n_scalars: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            image_height: 224,
            image_width: 224,
            channels: 1,
            n_antennas: 4,
            n_scalars: 1024,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 16x16 spectrograms and 4 x 128 IQ captures.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                enc_blocks: 2,
                enc_dim: 64,
                enc_hidden: 256,
                enc_heads: 4,
                dec_blocks: 1,
                dec_dim: 32,
                dec_hidden: 128,
                dec_heads: 2,
                patch: 4,
                segment: 16,
            },
            image_height: 16,
            image_width: 16,
            channels: 1,
            n_antennas: 4,
            n_scalars: 128,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.backbone.patch, self.image_width / self.backbone.patch)
    }

    pub fn n_patches(&self) -> usize {
        num_patches(self.image_height, self.image_width, self.backbone.patch)
    }

    pub fn n_segments(&self) -> usize {
        num_segments(self.n_antennas, self.n_scalars, self.backbone.segment)
    }

    pub fn patch_dim(&self) -> usize {
        self.backbone.patch * self.backbone.patch * self.channels
    }

    pub fn n_tokens(&self, modality: Modality) -> usize {
        match modality {
            Modality::ImageLike => self.n_patches(),
            Modality::Iq => self.n_segments(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let b = &self.backbone;
        if self.channels == 0 || self.n_antennas == 0 {
            return Err(Error::Config("channels and antennas must be positive".into()));
        }
        if self.image_height % b.patch != 0 || self.image_width % b.patch != 0 || self.image_height == 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {} pixel patches",
                self.image_height, self.image_width, b.patch
            )));
        }
        if self.n_scalars == 0 || self.n_scalars % b.segment != 0 {
            return Err(Error::Config(format!(
                "{} scalars not divisible into segments of {}",
                self.n_scalars, b.segment
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        self.backbone.write_kv(&mut kv, "model");
        kv.set("model.image_height", self.image_height);
        kv.set("model.image_width", self.image_width);
        kv.set("model.channels", self.channels);
        kv.set("model.n_antennas", self.n_antennas);
        kv.set("model.n_scalars", self.n_scalars);
        kv
    }

    /// Read `model.*` keys; `model.preset = tiny` selects the tiny base.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let base = match kv.get_str("model.preset") {
            None | Some("default") => Self::default(),
            Some("tiny") => Self::tiny(),
            Some(other) => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        let cfg = Self {
            backbone: base.backbone.read_kv(kv, "model")?,
            image_height: kv.get_or("model.image_height", base.image_height)?,
            image_width: kv.get_or("model.image_width", base.image_width)?,
            channels: kv.get_or("model.channels", base.channels)?,
            n_antennas: kv.get_or("model.n_antennas", base.n_antennas)?,
            n_scalars: kv.get_or("model.n_scalars", base.n_scalars)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token precursors for one sample of either modality.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenInput {
    Image(PatchSequence),
    Iq(SegmentSequence),
}

impl TokenInput {
    pub fn modality(&self) -> Modality {
        match self {
            TokenInput::Image(_) => Modality::ImageLike,
            TokenInput::Iq(_) => Modality::Iq,
        }
    }

    /// Raw patch or segment values, one row per token.
    pub fn precursors(&self) -> &Mat {
        match self {
            TokenInput::Image(p) => &p.patches,
            TokenInput::Iq(s) => &s.segments,
        }
    }

    pub fn len(&self) -> usize {
        self.precursors().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter groups of the pretraining model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Decoder,
    Embedder,
    /// Encoder-to-decoder projection and the mask token.
    Bridge,
    Heads,
    All,
}

impl Scope {
    pub const ALL: [Scope; 6] =
        [Scope::Encoder, Scope::Decoder, Scope::Embedder, Scope::Bridge, Scope::Heads, Scope::All];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
            Scope::Embedder => "embed",
            Scope::Bridge => "bridge",
            Scope::Heads => "heads",
            Scope::All => "all",
        }
    }

    fn covers(self, name: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::Bridge => name.starts_with("bridge.") || name == "mask_token",
            s => name.starts_with(&format!("{}.", s.name())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalMae {
    pub config: ModelConfig,
    pub embedder: ModalityEmbedder,
    pub backbone: Backbone,
    pub mask_token: MaskToken,
    pub heads: ReconHeads,
    /// Fixed sinusoidal tables at encoder width.
    pub pos_enc: PositionalTable,
    /// The same tables recomputed at decoder width.
    pub pos_dec: PositionalTable,
}

/// Intermediate values of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub loss: f64,
    /// Reconstructed token precursors for every position.
    pub recon: Mat,
    embed: EmbedCache,
    n_tokens: usize,
    encoded: Mat,
    enc: StackCache,
    decoded: Mat,
    dec: StackCache,
}

impl MultimodalMae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[TAG_INIT]);
        let b = &config.backbone;
        let embedder = ModalityEmbedder::new(config.patch_dim(), b.segment, config.n_antennas, b.enc_dim, &mut rng);
        let backbone = Backbone::new(b, &mut rng);
        let mask_token = MaskToken(Param::normal(1, b.dec_dim, INIT_STD, &mut rng));
        let heads = ReconHeads::new(b.dec_dim, config.patch_dim(), b.segment, &mut rng);
        let grid = config.grid();
        let k = config.n_segments();
        Ok(Self {
            config,
            embedder,
            backbone,
            mask_token,
            heads,
            pos_enc: PositionalTable::new(grid, k, b.enc_dim)?,
            pos_dec: PositionalTable::new(grid, k, b.dec_dim)?,
        })
    }

    pub fn count_params(&self, scope: Scope) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |name, p| {
            if scope.covers(name) {
                n += p.len();
            }
        });
        n
    }

    fn check_input(&self, input: &TokenInput) -> Result<()> {
        let expect = self.config.n_tokens(input.modality());
        if input.len() != expect {
            return Err(shape_err(format!(
                "{} input has {} tokens, model expects {expect}",
                input.modality().tag(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Embedded tokens for all positions (encoder width).
    pub fn embed(&self, input: &TokenInput) -> Result<(Mat, EmbedCache)> {
        self.check_input(input)?;
        let (seq, cache) = match input {
            TokenInput::Image(p) => self.embedder.embed_image(p, &self.pos_enc)?,
            TokenInput::Iq(s) => self.embedder.embed_iq(s, &self.pos_enc)?,
        };
        Ok((seq.tokens, cache))
    }

    /// Embed, drop masked tokens, encode, restore, decode and reconstruct.
    /// The loss is the masked MSE over `plan.masked`.
    pub fn forward_sample(&self, input: &TokenInput, plan: &MaskPlan) -> Result<SampleForward> {
        if plan.n_total != input.len() {
            return Err(shape_err(format!("mask plan for {} tokens, input has {}", plan.n_total, input.len())));
        }
        let modality = input.modality();
        let (tokens, embed) = self.embed(input)?;
        let visible = tokens.select(Axis(0), &plan.kept);
        let (encoded, enc) = self.backbone.encode(&visible)?;
        let bridged = self.backbone.project_to_decoder(&encoded)?;
        let full = restore(&bridged, plan, &self.mask_token, self.pos_dec.for_modality(modality))?;
        let (decoded, dec) = self.backbone.decode(&full)?;
        let head = match modality {
            Modality::ImageLike => &self.heads.image,
            Modality::Iq => &self.heads.iq,
        };
        let recon = head.forward(&decoded)?;
        let loss = if plan.masked.is_empty() { 0.0 } else { masked_mse(input.precursors(), &recon, &plan.masked)? };
        Ok(SampleForward { loss, recon, embed, n_tokens: input.len(), encoded, enc, decoded, dec })
    }

    /// Accumulate `weight * d loss / d theta` into every trainable parameter.
    pub fn backward_sample(
        &mut self,
        input: &TokenInput,
        plan: &MaskPlan,
        fwd: &SampleForward,
        weight: f64,
    ) -> Result<()> {
        if plan.masked.is_empty() {
            return Err(Error::Empty("no masked tokens to learn from".into()));
        }
        let drecon = masked_mse_grad(input.precursors(), &fwd.recon, &plan.masked, weight)?;
        let head = match input.modality() {
            Modality::ImageLike => &mut self.heads.image,
            Modality::Iq => &mut self.heads.iq,
        };
        let ddecoded = head.backward(&fwd.decoded, &drecon);
        let dfull = self.backbone.decoder.backward(&fwd.dec, &ddecoded);
        let (dbridged, dtoken) = restore_backward(&dfull, plan);
        if self.mask_token.0.requires_grad {
            self.mask_token.0.grad += &dtoken;
        }
        let dencoded = self.backbone.bridge.backward(&fwd.encoded, &dbridged);
        let dvisible = self.backbone.encoder.backward(&fwd.enc, &dencoded);
        let mut dz = Mat::zeros((fwd.n_tokens, dvisible.ncols()));
        for (row, &i) in plan.kept.iter().enumerate() {
            dz.row_mut(i).assign(&dvisible.row(row));
        }
        self.embedder.backward(&fwd.embed, &dz);
        Ok(())
    }

    /// Encoder features with every token visible.
    pub fn encode_full(&self, input: &TokenInput) -> Result<Mat> {
        let (tokens, _) = self.embed(input)?;
        Ok(self.backbone.encode(&tokens)?.0)
    }
}

impl Parameterized for MultimodalMae {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embedder.visit_params(&join(prefix, "embed"), f);
        self.backbone.visit_params(prefix, f);
        f(&join(prefix, "mask_token"), &self.mask_token.0);
        self.heads.visit_params(&join(prefix, "heads"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embedder.visit_params_mut(&join(prefix, "embed"), f);
        self.backbone.visit_params_mut(prefix, f);
        f(&join(prefix, "mask_token"), &mut self.mask_token.0);
        self.heads.visit_params_mut(&join(prefix, "heads"), f);
    }
}
