//! Token precursors: flattened image patches and fixed-length IQ segments.

use ndarray::{s, Array2, Array3};

use crate::error::{shape_err, Result};
use crate::signalgen::{ImageLikeSample, IqSample};

/// `N` flattened patches of `P*P*C` values each, in row-major grid order.
///
/// Inside a patch values are laid out channel-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    /// `(H / P, W / P)`.
    pub grid: (usize, usize),
    pub patch: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }
}

/// `K` segments of `S` scalars in antenna-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub segments: Array2<f64>,
    /// Zero-based source antenna of every segment, nondecreasing.
    pub antenna_of: Vec<usize>,
    pub segment: usize,
}

impl SegmentSequence {
    pub fn len(&self) -> usize {
        self.segments.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.nrows() == 0
    }
}

pub fn num_patches(h: usize, w: usize, p: usize) -> usize {
    h * w / (p * p)
}

pub fn num_segments(m: usize, t: usize, s: usize) -> usize {
    m * t / s
}

pub fn patchify(x: &ImageLikeSample, p: usize) -> Result<PatchSequence> {
    let (c, h, w) = x.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let mut patches = Array2::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = patches.row_mut(gy * gw + gx);
            let block = x.data.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
            for (dst, &v) in row.iter_mut().zip(block.iter()) {
                *dst = v;
            }
        }
    }
    Ok(PatchSequence { patches, grid: (gh, gw), patch: p, channels: c })
}

pub fn unpatchify(seq: &PatchSequence, c: usize, h: usize, w: usize) -> Result<ImageLikeSample> {
    let p = seq.patch;
    if p == 0 || h % p != 0 || w % p != 0 || seq.grid != (h / p, w / p) || seq.channels != c {
        return Err(shape_err(format!(
            "patch grid {:?} (P={p}, C={}) inconsistent with {c}x{h}x{w}",
            seq.grid, seq.channels
        )));
    }
    if seq.patches.dim() != (seq.grid.0 * seq.grid.1, p * p * c) {
        return Err(shape_err(format!("patch matrix has shape {:?}", seq.patches.dim())));
    }
    let gw = w / p;
    let mut data = Array3::zeros((c, h, w));
    for (n, row) in seq.patches.outer_iter().enumerate() {
        let (gy, gx) = (n / gw, n % gw);
        let mut block = data.slice_mut(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
        for (dst, &v) in block.iter_mut().zip(row.iter()) {
            *dst = v;
        }
    }
    Ok(ImageLikeSample { data })
}

pub fn segment(x: &IqSample, seg: usize) -> Result<SegmentSequence> {
    let (m, t) = x.data.dim();
    if seg == 0 || t % seg != 0 {
        return Err(shape_err(format!("segment length {seg} does not divide {t}")));
    }
    let per = t / seg;
    let segments = x.data.to_shape((m * per, seg)).map_err(|e| shape_err(e.to_string()))?.to_owned();
    let antenna_of = (0..m * per).map(|k| k / per).collect();
    Ok(SegmentSequence { segments, antenna_of, segment: seg })
}

pub fn desegment(seq: &SegmentSequence, m: usize, t: usize) -> Result<IqSample> {
    let s = seq.segment;
    if s == 0 || t % s != 0 || seq.segments.dim() != (m * t / s, s) {
        return Err(shape_err(format!(
            "{} segments of {} cannot form a {m}x{t} stream",
            seq.segments.nrows(),
            seq.segments.ncols()
        )));
    }
    let data = seq.segments.to_shape((m, t)).map_err(|e| shape_err(e.to_string()))?.to_owned();
    Ok(IqSample { data })
}
