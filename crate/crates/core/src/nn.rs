//! Dense layers with explicit backward passes.
//!
//! Every layer works on one sequence at a time (`rows = tokens`). `forward`
//! returns the output plus whatever the backward pass needs; `backward`
//! accumulates parameter gradients in place and returns the gradient with
//! respect to the layer input. Gradients of parameters whose
//! `requires_grad` flag is off are not accumulated.
//!
//! Vectors (biases, norm scales, embeddings of one row) are stored as
//! `1 x n` matrices so every parameter is a single `Array2`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

pub type Mat = Array2<f64>;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
    pub requires_grad: bool,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.raw_dim());
        Self { value, grad, requires_grad: true }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Mat::zeros((rows, cols)))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::new(Mat::ones((rows, cols)))
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(Mat::from_shape_fn((rows, cols), |_| dist.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform access to named parameters. Names are dot-separated paths.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_requires_grad(&mut self, flag: bool) {
        self.visit_params_mut("", &mut |_, p| p.requires_grad = flag);
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

/// A bare parameter is named by its prefix alone.
impl Parameterized for Param {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self);
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn check_cols(x: &Mat, cols: usize, what: &str) -> Result<()> {
    if x.ncols() != cols {
        return Err(shape_err(format!("{what}: expected {cols} input features, got {}", x.ncols())));
    }
    Ok(())
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self { weight: Param::normal(d_in, d_out, INIT_STD, rng), bias: Param::zeros(1, d_out) }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Param::zeros(d_in, d_out), bias: Param::zeros(1, d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        check_cols(x, self.d_in(), "linear")?;
        Ok(x.dot(&self.weight.value) + &self.bias.value)
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        if self.weight.requires_grad {
            self.weight.grad += &x.t().dot(dy);
        }
        if self.bias.requires_grad {
            self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.value.t())
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Param,
    pub shift: Param,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { scale: Param::ones(1, dim), shift: Param::zeros(1, dim) }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, LayerNormCache)> {
        let d = self.scale.value.ncols();
        check_cols(x, d, "layer norm")?;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.scale.value + &self.shift.value;
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let xhat = &cache.xhat;
        if self.scale.requires_grad {
            self.scale.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if self.shift.requires_grad {
            self.shift.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let d = xhat.ncols() as f64;
        let dxhat = dy * &self.scale.value;
        let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let inner = dxhat * d - &sum_dxhat - &(xhat * &sum_dxhat_xhat);
        inner * &cache.inv_std.mapv(|s| s / d).insert_axis(Axis(1))
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Low-rank update `scale * (x A) B` attached to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `D x R`, random init.
    pub a: Param,
    /// `R x D`, zero init so the adapter starts as a zero delta.
    pub b: Param,
    /// `alpha / R`.
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        Self { a: Param::normal(d_in, rank, INIT_STD, rng), b: Param::zeros(rank, d_out), scale: alpha / rank as f64 }
    }

    pub fn rank(&self) -> usize {
        self.a.value.ncols()
    }

    /// Returns `(delta, x A)`.
    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let xa = x.dot(&self.a.value);
        let delta = xa.dot(&self.b.value) * self.scale;
        (delta, xa)
    }

    pub fn backward(&mut self, x: &Mat, xa: &Mat, dy: &Mat) -> Mat {
        let dy_bt = dy.dot(&self.b.value.t()) * self.scale;
        if self.b.requires_grad {
            self.b.grad += &(xa.t().dot(dy) * self.scale);
        }
        if self.a.requires_grad {
            self.a.grad += &x.t().dot(&dy_bt);
        }
        dy_bt.dot(&self.a.value.t())
    }
}

impl Parameterized for LoraAdapter {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "a"), &self.a);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "a"), &mut self.a);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// `W x + b + (alpha/R) B(A x)`; with `B = 0` this is exactly the frozen
/// projection.
pub fn lora_forward(x: &Mat, frozen: &Linear, adapter: &LoraAdapter) -> Result<Mat> {
    check_cols(x, adapter.a.value.nrows(), "lora")?;
    if adapter.b.value.ncols() != frozen.d_out() || adapter.a.value.ncols() != adapter.b.value.nrows() {
        return Err(shape_err("adapter shape does not match projection"));
    }
    Ok(frozen.forward(x)? + adapter.forward(x).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub query_lora: Option<LoraAdapter>,
    pub value_lora: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    q_xa: Option<Mat>,
    v_xa: Option<Mat>,
    /// Softmax weights per head, `n x n` each.
    probs: Vec<Mat>,
    merged: Mat,
}

impl Attention {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            heads,
            query_lora: None,
            value_lora: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.d_in()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, AttentionCache)> {
        let d = self.dim();
        check_cols(x, d, "attention")?;
        let n = x.nrows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut q = self.query.forward(x)?;
        let q_xa = self.query_lora.as_ref().map(|ad| {
            let (delta, xa) = ad.forward(x);
            q += &delta;
            xa
        });
        let k = self.key.forward(x)?;
        let mut v = self.value.forward(x)?;
        let v_xa = self.value_lora.as_ref().map(|ad| {
            let (delta, xa) = ad.forward(x);
            v += &delta;
            xa
        });

        let mut merged = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            merged.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let y = self.out.forward(&merged)?;
        Ok((y, AttentionCache { x: x.clone(), q, k, v, q_xa, v_xa, probs, merged }))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Mat) -> Mat {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.x.nrows();

        let dmerged = self.out.backward(&cache.merged, dy);
        let mut dq = Mat::zeros((n, d));
        let mut dk = Mat::zeros((n, d));
        let mut dv = Mat::zeros((n, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dout = dmerged.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let dp = dout.dot(&cache.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }

        let x = &cache.x;
        let mut dx = self.query.backward(x, &dq);
        if let (Some(ad), Some(xa)) = (self.query_lora.as_mut(), cache.q_xa.as_ref()) {
            dx += &ad.backward(x, xa, &dq);
        }
        dx += &self.key.backward(x, &dk);
        dx += &self.value.backward(x, &dv);
        if let (Some(ad), Some(xa)) = (self.value_lora.as_mut(), cache.v_xa.as_ref()) {
            dx += &ad.backward(x, xa, &dv);
        }
        dx
    }
}

impl Parameterized for Attention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit_params(&join(prefix, "query"), f);
        self.key.visit_params(&join(prefix, "key"), f);
        self.value.visit_params(&join(prefix, "value"), f);
        self.out.visit_params(&join(prefix, "out"), f);
        if let Some(ad) = &self.query_lora {
            ad.visit_params(&join(prefix, "query_lora"), f);
        }
        if let Some(ad) = &self.value_lora {
            ad.visit_params(&join(prefix, "value_lora"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_params_mut(&join(prefix, "query"), f);
        self.key.visit_params_mut(&join(prefix, "key"), f);
        self.value.visit_params_mut(&join(prefix, "value"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
        if let Some(ad) = &mut self.query_lora {
            ad.visit_params_mut(&join(prefix, "query_lora"), f);
        }
        if let Some(ad) = &mut self.value_lora {
            ad.visit_params_mut(&join(prefix, "value_lora"), f);
        }
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::new(dim, hidden, rng), fc2: Linear::new(hidden, dim, rng) }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act)?;
        Ok((y, MlpCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Mat) -> Mat {
        let dact = self.fc2.backward(&cache.act, dy);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(&cache.x, &dpre)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm transformer block:
/// `x + attn(norm1(x))`, then `h + mlp(norm2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, BlockCache)> {
        let (a_in, n1) = self.norm1.forward(x)?;
        let (a_out, attn) = self.attn.forward(&a_in)?;
        let h = x + &a_out;
        let (m_in, n2) = self.norm2.forward(&h)?;
        let (m_out, mlp) = self.mlp.forward(&m_in)?;
        Ok((h + &m_out, BlockCache { n1, attn, n2, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Mat) -> Mat {
        let dm_in = self.mlp.backward(&cache.mlp, dy);
        let dh = dy + &self.norm2.backward(&cache.n2, &dm_in);
        let da_in = self.attn.backward(&cache.attn, &dh);
        &dh + &self.norm1.backward(&cache.n1, &da_in)
    }
}

impl Parameterized for Block {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_params_mut(&join(prefix, "mlp"), f);
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl TransformerStack {
    pub fn new<R: Rng>(depth: usize, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self { blocks: (0..depth).map(|_| Block::new(dim, heads, hidden, rng)).collect(), norm: LayerNorm::new(dim) }
    }

    pub fn dim(&self) -> usize {
        self.norm.scale.value.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, StackCache)> {
        if x.nrows() == 0 {
            return Err(shape_err("transformer input has no tokens"));
        }
        check_cols(x, self.dim(), "transformer")?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h)?;
            caches.push(cache);
            h = next;
        }
        let (y, norm) = self.norm.forward(&h)?;
        Ok((y, StackCache { blocks: caches, norm }))
    }

    pub fn backward(&mut self, cache: &StackCache, dy: &Mat) -> Mat {
        let mut g = self.norm.backward(&cache.norm, dy);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g);
        }
        g
    }
}

impl Parameterized for TransformerStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn scramble<M: Parameterized>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
        m.visit_params_mut("", &mut |_, p| {
            p.value.mapv_inplace(|v| v + rng.random_range(-std..std));
        });
    }

    /// Scalar loss `sum(y * w)` with a fixed random weighting.
    fn weighted(y: &Mat, w: &Mat) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn block_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stack = TransformerStack::new(2, 8, 2, 16, &mut rng);
        scramble(&mut stack, 0.5, &mut rng);
        let x = rand_mat(4, 8, &mut rng);
        let w = rand_mat(4, 8, &mut rng);
        let (y, cache) = stack.forward(&x).unwrap();
        stack.zero_grad();
        let dx = stack.backward(&cache, &w);
        let _ = y;
        let report = gradcheck::check(&mut stack, &|m| weighted(&m.forward(&x).unwrap().0, &w), 1e-3, 1e-8);
        for (name, err) in &report {
            assert!(*err <= 1e-4, "{name}: {err}");
        }
        // input gradient
        for idx in 0..x.len() {
            let (r, c) = (idx / 8, idx % 8);
            let num = gradcheck::five_point(
                &mut |d| {
                    let mut xp = x.clone();
                    xp[[r, c]] += d;
                    weighted(&stack.forward(&xp).unwrap().0, &w)
                },
                1e-3,
            );
            assert!(gradcheck::rel_err(dx[[r, c]], num, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut attn = Attention::new(8, 2, &mut rng);
        attn.query_lora = Some(LoraAdapter::new(8, 8, 2, 4.0, &mut rng));
        attn.value_lora = Some(LoraAdapter::new(8, 8, 2, 4.0, &mut rng));
        scramble(&mut attn, 0.5, &mut rng);
        let x = rand_mat(3, 8, &mut rng);
        let w = rand_mat(3, 8, &mut rng);
        let (_, cache) = attn.forward(&x).unwrap();
        attn.zero_grad();
        attn.backward(&cache, &w);
        for (name, err) in gradcheck::check(&mut attn, &|m| weighted(&m.forward(&x).unwrap().0, &w), 1e-3, 1e-8) {
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn frozen_params_accumulate_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(3, 2, &mut rng);
        lin.weight.requires_grad = false;
        let x = rand_mat(2, 3, &mut rng);
        let dx = lin.backward(&x, &Mat::ones((2, 2)));
        assert!(lin.weight.grad.iter().all(|&g| g == 0.0));
        assert_eq!(lin.bias.grad, array![[2.0, 2.0]]);
        assert_eq!(dx.dim(), (2, 3));
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = Block::new(8, 2, 16, &mut rng);
        block.attn.out = Linear::zeros(8, 8);
        block.mlp.fc2 = Linear::zeros(16, 8);
        let x = rand_mat(5, 8, &mut rng);
        assert_eq!(block.forward(&x).unwrap().0, x);
    }

    #[test]
    fn lora_rank_one_hand_example() {
        // W = I, b = 0, A = [1, 2]^T, B = [3, -1], alpha = R = 1.
        let frozen = Linear { weight: Param::new(array![[1.0, 0.0], [0.0, 1.0]]), bias: Param::zeros(1, 2) };
        let adapter =
            LoraAdapter { a: Param::new(array![[1.0], [2.0]]), b: Param::new(array![[3.0, -1.0]]), scale: 1.0 };
        // x = (1, 1): x A = 3; delta = (9, -3); y = (10, -2)
        let y = lora_forward(&array![[1.0, 1.0]], &frozen, &adapter).unwrap();
        assert_eq!(y, array![[10.0, -2.0]]);
    }

    #[test]
    fn zero_b_lora_is_exactly_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frozen = Linear::new(6, 6, &mut rng);
        let adapter = LoraAdapter::new(6, 6, 3, 3.0, &mut rng);
        assert_eq!(adapter.scale, 1.0);
        let x = rand_mat(4, 6, &mut rng);
        assert_eq!(lora_forward(&x, &frozen, &adapter).unwrap(), frozen.forward(&x).unwrap());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lin = Linear::new(3, 2, &mut rng);
        assert!(lin.forward(&Mat::zeros((1, 4))).is_err());
        let stack = TransformerStack::new(1, 4, 2, 8, &mut rng);
        assert!(stack.forward(&Mat::zeros((0, 4))).is_err());
    }
}
