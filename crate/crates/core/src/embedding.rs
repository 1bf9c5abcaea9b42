//! Modality-specific input embeddings into the shared encoder width.
//!
//! Image patches and IQ segments each get their own linear projection and a
//! feature-wise affine layer (`gamma`, `beta`). Fixed sinusoidal positional
//! tables are then added (2D grid for images, 1D sequence order for IQ) and
//! IQ tokens additionally receive the learned embedding of their source
//! antenna.

use ndarray::{s, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Mat, Param, Parameterized, INIT_STD};
use crate::signalgen::Modality;
use crate::tokenizer::{PatchSequence, SegmentSequence};

/// Tokens plus per-token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    /// Original (pre-masking) position of every row.
    pub positions: Vec<usize>,
    /// Source antenna of every row, IQ only.
    pub antennas: Option<Vec<usize>>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// `length x dim` table; row `k` holds `sin(k w_i)` at even and `cos(k w_i)`
/// at odd columns with `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_1d(length: usize, dim: usize) -> Result<Mat> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Config(format!("1D sinusoidal table needs an even width, got {dim}")));
    }
    let mut table = Mat::zeros((length, dim));
    for k in 0..length {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = k as f64 * freq;
            table[[k, 2 * i]] = angle.sin();
            table[[k, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(table)
}

/// Row-major grid table: the first `dim/2` columns encode the row
/// coordinate, the last `dim/2` the column coordinate.
pub fn sinusoidal_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Mat> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Config(format!("2D sinusoidal table needs width divisible by 4, got {dim}")));
    }
    let half = dim / 2;
    let rows = sinusoidal_1d(grid_h, half)?;
    let cols = sinusoidal_1d(grid_w, half)?;
    let mut table = Mat::zeros((grid_h * grid_w, dim));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let mut out = table.row_mut(r * grid_w + c);
            out.slice_mut(s![..half]).assign(&rows.row(r));
            out.slice_mut(s![half..]).assign(&cols.row(c));
        }
    }
    Ok(table)
}

/// Frozen positional tables for one model width. Not a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    pub pos_2d: Mat,
    pub pos_1d: Mat,
}

impl PositionalTable {
    pub fn new(grid: (usize, usize), seq_len: usize, dim: usize) -> Result<Self> {
        Ok(Self { pos_2d: sinusoidal_2d(grid.0, grid.1, dim)?, pos_1d: sinusoidal_1d(seq_len, dim)? })
    }

    pub fn for_modality(&self, modality: Modality) -> &Mat {
        match modality {
            Modality::ImageLike => &self.pos_2d,
            Modality::Iq => &self.pos_1d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedder {
    pub image_proj: Linear,
    pub iq_proj: Linear,
    pub image_gamma: Param,
    pub image_beta: Param,
    pub iq_gamma: Param,
    pub iq_beta: Param,
    /// One row per antenna.
    pub antenna: Param,
}

/// What the embedding backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    modality: Modality,
    input: Mat,
    projected: Mat,
    antennas: Option<Vec<usize>>,
}

impl ModalityEmbedder {
    pub fn new<R: Rng>(patch_dim: usize, segment: usize, n_antennas: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            image_proj: Linear::new(patch_dim, dim, rng),
            iq_proj: Linear::new(segment, dim, rng),
            image_gamma: Param::ones(1, dim),
            image_beta: Param::zeros(1, dim),
            iq_gamma: Param::ones(1, dim),
            iq_beta: Param::zeros(1, dim),
            antenna: Param::normal(n_antennas, dim, INIT_STD, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.image_gamma.value.ncols()
    }

    pub fn n_antennas(&self) -> usize {
        self.antenna.value.nrows()
    }

    fn parts(&self, modality: Modality) -> (&Linear, &Param, &Param) {
        match modality {
            Modality::ImageLike => (&self.image_proj, &self.image_gamma, &self.image_beta),
            Modality::Iq => (&self.iq_proj, &self.iq_gamma, &self.iq_beta),
        }
    }

    /// Projection followed by the modality affine: `(X E + b) * gamma + beta`.
    /// Returns `(affine output, plain projection)`.
    pub fn project(&self, modality: Modality, input: &Mat) -> Result<(Mat, Mat)> {
        let (proj, gamma, beta) = self.parts(modality);
        let projected = proj.forward(input)?;
        let u = &projected * &gamma.value + &beta.value;
        Ok((u, projected))
    }

    pub fn embed_image(&self, p: &PatchSequence, pos: &PositionalTable) -> Result<(TokenSequence, EmbedCache)> {
        let (u, projected) = self.project(Modality::ImageLike, &p.patches)?;
        if pos.pos_2d.dim() != u.dim() {
            return Err(shape_err(format!(
                "positional table {:?} does not fit {} image tokens",
                pos.pos_2d.dim(),
                u.nrows()
            )));
        }
        let tokens = u + &pos.pos_2d;
        let n = tokens.nrows();
        Ok((
            TokenSequence { tokens, positions: (0..n).collect(), antennas: None, modality: Modality::ImageLike },
            EmbedCache { modality: Modality::ImageLike, input: p.patches.clone(), projected, antennas: None },
        ))
    }

    pub fn embed_iq(&self, seq: &SegmentSequence, pos: &PositionalTable) -> Result<(TokenSequence, EmbedCache)> {
        let m = self.n_antennas();
        if let Some(&bad) = seq.antenna_of.iter().find(|&&a| a >= m) {
            return Err(Error::OutOfRange(format!("antenna index {bad} but model has {m} antennas")));
        }
        if seq.antenna_of.len() != seq.len() {
            return Err(shape_err("antenna list length differs from segment count"));
        }
        let (u, projected) = self.project(Modality::Iq, &seq.segments)?;
        if pos.pos_1d.dim() != u.dim() {
            return Err(shape_err(format!(
                "positional table {:?} does not fit {} IQ tokens",
                pos.pos_1d.dim(),
                u.nrows()
            )));
        }
        let ant = self.antenna.value.select(Axis(0), &seq.antenna_of);
        let tokens = u + &pos.pos_1d + &ant;
        let n = tokens.nrows();
        Ok((
            TokenSequence {
                tokens,
                positions: (0..n).collect(),
                antennas: Some(seq.antenna_of.clone()),
                modality: Modality::Iq,
            },
            EmbedCache {
                modality: Modality::Iq,
                input: seq.segments.clone(),
                projected,
                antennas: Some(seq.antenna_of.clone()),
            },
        ))
    }

    /// Accumulate gradients given `d loss / d tokens` for the full sequence.
    pub fn backward(&mut self, cache: &EmbedCache, dz: &Mat) {
        if let Some(antennas) = &cache.antennas {
            if self.antenna.requires_grad {
                for (k, &a) in antennas.iter().enumerate() {
                    let mut row = self.antenna.grad.row_mut(a);
                    row += &dz.row(k);
                }
            }
        }
        let (proj, gamma, beta) = match cache.modality {
            Modality::ImageLike => (&mut self.image_proj, &mut self.image_gamma, &mut self.image_beta),
            Modality::Iq => (&mut self.iq_proj, &mut self.iq_gamma, &mut self.iq_beta),
        };
        if gamma.requires_grad {
            gamma.grad += &(dz * &cache.projected).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if beta.requires_grad {
            beta.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if proj.weight.requires_grad || proj.bias.requires_grad {
            let dproj = dz * &gamma.value;
            proj.backward(&cache.input, &dproj);
        }
    }
}

impl Parameterized for ModalityEmbedder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.image_proj.visit_params(&join(prefix, "image_proj"), f);
        f(&join(prefix, "image_gamma"), &self.image_gamma);
        f(&join(prefix, "image_beta"), &self.image_beta);
        self.iq_proj.visit_params(&join(prefix, "iq_proj"), f);
        f(&join(prefix, "iq_gamma"), &self.iq_gamma);
        f(&join(prefix, "iq_beta"), &self.iq_beta);
        f(&join(prefix, "antenna"), &self.antenna);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.image_proj.visit_params_mut(&join(prefix, "image_proj"), f);
        f(&join(prefix, "image_gamma"), &mut self.image_gamma);
        f(&join(prefix, "image_beta"), &mut self.image_beta);
        self.iq_proj.visit_params_mut(&join(prefix, "iq_proj"), f);
        f(&join(prefix, "iq_gamma"), &mut self.iq_gamma);
        f(&join(prefix, "iq_beta"), &mut self.iq_beta);
        f(&join(prefix, "antenna"), &mut self.antenna);
    }
}
