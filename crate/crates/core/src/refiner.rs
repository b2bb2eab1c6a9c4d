//! Reference-guided one-step refiner.
//!
//! A small patch transformer predicts noise `ε̂(x_t; reference, mask, t)`.
//! Each block mixes cross-attention to reference-view tokens and
//! self-attention, blended per token by the transient mask. Refinement is a
//! single denoising step at a fixed timestep:
//!
//! ```text
//! refine(x) = clamp(x − σ_t / √ᾱ_t · ε̂(√ᾱ_t · x; ref, M, t))
//! ```
//!
//! so a network whose decoder outputs zero is the identity. Only the low-rank
//! adapter on the decoder is trained; every other weight is frozen.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorFile;
use crate::scene::{ImageBuffer, ScalarMap, TransientMask};

pub const TIMESTEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub lora_rank: usize,
    /// Timestep used by [`Refiner::refine`].
    pub inference_t: usize,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig { patch: 4, width: 32, layers: 2, ff_hidden: 64, lora_rank: 4, inference_t: 199, seed: 0 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.layers == 0 || self.ff_hidden == 0 {
            return Err(Error::InvalidParameter("refiner dimensions must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::InvalidParameter("LoRA rank must be at least 1".into()));
        }
        if self.inference_t >= TIMESTEPS {
            return Err(Error::InvalidParameter(format!("inference_t must be below {TIMESTEPS}")));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Tokens on an `h × w` grid, stored as the columns of a `d × (h·w)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: DMatrix<f64>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, tokens: DMatrix<f64>) -> Result<Self> {
        if tokens.ncols() != h * w {
            return Err(Error::InvalidInput(format!("{} tokens for a {h}x{w} grid", tokens.ncols())));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite token values".into()));
        }
        Ok(FeatureGrid { h, w, tokens })
    }

    pub fn d(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.ncols() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ff1: DMatrix<f64>,
    pub ff1_bias: DVector<f64>,
    pub ff2: DMatrix<f64>,
    pub ff2_bias: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub embed: DMatrix<f64>,
    pub embed_bias: DVector<f64>,
    pub layers: Vec<AttentionLayer>,
    pub decoder: DMatrix<f64>,
    pub decoder_bias: DVector<f64>,
    /// Sinusoidal timestep embeddings, one column per timestep.
    pub time_table: DMatrix<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

pub fn timestep_table(width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(width, TIMESTEPS, |i, t| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let a = t as f64 * freq;
        0.1 * if i % 2 == 0 { a.sin() } else { a.cos() }
    })
}

impl RefinerParams {
    /// Random frozen trunk with a zero decoder, so the refiner starts as the
    /// identity map.
    pub fn new(config: &RefinerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, pd, hid) = (config.width, config.patch_dim(), config.ff_hidden);
        let embed = gaussian_matrix(&mut rng, d, pd, (1.0 / pd as f64).sqrt());
        let layers = (0..config.layers)
            .map(|_| AttentionLayer {
                wq: gaussian_matrix(&mut rng, d, d, (1.0 / d as f64).sqrt()),
                wk: gaussian_matrix(&mut rng, d, d, (1.0 / d as f64).sqrt()),
                wv: gaussian_matrix(&mut rng, d, d, (1.0 / d as f64).sqrt()),
                wo: gaussian_matrix(&mut rng, d, d, 0.5 * (1.0 / d as f64).sqrt()),
                ff1: gaussian_matrix(&mut rng, hid, d, (1.0 / d as f64).sqrt()),
                ff1_bias: DVector::zeros(hid),
                ff2: gaussian_matrix(&mut rng, d, hid, 0.5 * (1.0 / hid as f64).sqrt()),
                ff2_bias: DVector::zeros(d),
            })
            .collect();
        RefinerParams {
            embed,
            embed_bias: DVector::zeros(d),
            layers,
            decoder: DMatrix::zeros(pd, d),
            decoder_bias: DVector::zeros(pd),
            time_table: timestep_table(d),
        }
    }

    pub fn is_finite(&self) -> bool {
        let mats = [&self.embed, &self.decoder, &self.time_table];
        mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.layers.iter().all(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.ff1, &l.ff2].iter().all(|m| m.iter().all(|v| v.is_finite()))
            })
    }
}

/// Low-rank adapter `W + B·A / r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LoraAdapter {
    /// `A` random, `B` zero, so the adapted weight starts equal to the base.
    pub fn new(rows: usize, cols: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParameter("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LoraAdapter { a: gaussian_matrix(&mut rng, rank, cols, (1.0 / cols as f64).sqrt()), b: DMatrix::zeros(rows, rank) })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

pub fn apply_lora(base: &DMatrix<f64>, adapter: &LoraAdapter) -> Result<DMatrix<f64>> {
    let r = adapter.rank();
    if adapter.b.ncols() != r || adapter.b.nrows() != base.nrows() || adapter.a.ncols() != base.ncols() {
        return Err(Error::InvalidInput("adapter shape does not match the base matrix".into()));
    }
    Ok(base + &adapter.b * &adapter.a / r as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraGrad {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl AdamMoments {
    fn zeros_like(x: &DMatrix<f64>) -> Self {
        AdamMoments { m: DMatrix::zeros(x.nrows(), x.ncols()), v: DMatrix::zeros(x.nrows(), x.ncols()) }
    }

    fn step(&mut self, x: &mut DMatrix<f64>, g: &DMatrix<f64>, lr: f64, step: u64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(step as i32);
        let bc2 = 1.0 - B2.powi(step as i32);
        for i in 0..x.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraOptimizer {
    pub a: AdamMoments,
    pub b: AdamMoments,
    pub step: u64,
}

/// Linear-β diffusion schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1e-4, 0.02, TIMESTEPS)
    }
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1).max(1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        NoiseSchedule { alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| Error::InvalidInput(format!("timestep {t} outside [0, {})", self.len())))
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

/// Row-stochastic attention weights between query and key tokens.
pub fn attention_weights(q_src: &FeatureGrid, k_src: &FeatureGrid, layer: &AttentionLayer) -> DMatrix<f64> {
    let q = &layer.wq * &q_src.tokens;
    let k = &layer.wk * &k_src.tokens;
    let mut logits = q.transpose() * k / (q_src.d() as f64).sqrt();
    softmax_rows(&mut logits);
    logits
}

fn attend(q_src: &FeatureGrid, kv_src: &FeatureGrid, layer: &AttentionLayer) -> DMatrix<f64> {
    let p = attention_weights(q_src, kv_src, layer);
    let v = &layer.wv * &kv_src.tokens;
    v * p.transpose()
}

pub fn cross_attention(q_src: &FeatureGrid, kv_src: &FeatureGrid, layer: &AttentionLayer) -> Result<FeatureGrid> {
    check_grids(q_src, kv_src, layer)?;
    FeatureGrid::new(q_src.h, q_src.w, attend(q_src, kv_src, layer))
}

pub fn self_attention(src: &FeatureGrid, layer: &AttentionLayer) -> Result<FeatureGrid> {
    check_grids(src, src, layer)?;
    FeatureGrid::new(src.h, src.w, attend(src, src, layer))
}

fn check_grids(a: &FeatureGrid, b: &FeatureGrid, layer: &AttentionLayer) -> Result<()> {
    let d = layer.wq.ncols();
    if a.d() != d || b.d() != d {
        return Err(Error::InvalidInput(format!("token width {} / {} does not match layer width {d}", a.d(), b.d())));
    }
    Ok(())
}

/// `M ⊙ cross(q_src → kv_src) + (1 − M) ⊙ self(self_src)` with one mask value
/// per token.
pub fn masked_cross_attention(
    q_src: &FeatureGrid,
    kv_src: &FeatureGrid,
    self_src: &FeatureGrid,
    mask: &TransientMask,
    layer: &AttentionLayer,
) -> Result<FeatureGrid> {
    check_grids(q_src, kv_src, layer)?;
    check_grids(self_src, self_src, layer)?;
    if self_src.len() != q_src.len() || mask.width != q_src.w || mask.height != q_src.h {
        return Err(Error::InvalidInput("query, self and mask grids must share a shape".into()));
    }
    let cross = attend(q_src, kv_src, layer);
    let own = attend(self_src, self_src, layer);
    let mut out = cross;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let m = mask.values[j];
        for (c, s) in col.iter_mut().zip(own.column(j).iter()) {
            *c = m * *c + (1.0 - m) * s;
        }
    }
    FeatureGrid::new(q_src.h, q_src.w, out)
}

/// Area-average of `mask` over `patch × patch` cells.
pub fn downsample_mask(mask: &ScalarMap, patch: usize) -> Result<TransientMask> {
    if mask.width % patch != 0 || mask.height % patch != 0 {
        return Err(Error::InvalidInput(format!("mask {}x{} is not a multiple of {patch}", mask.width, mask.height)));
    }
    let (w, h) = (mask.width / patch, mask.height / patch);
    let mut out = ScalarMap::new(w, h);
    for ty in 0..h {
        for tx in 0..w {
            let mut s = 0.0;
            for py in 0..patch {
                for px in 0..patch {
                    s += mask.get(tx * patch + px, ty * patch + py);
                }
            }
            out.values[ty * w + tx] = s / (patch * patch) as f64;
        }
    }
    Ok(TransientMask::from_clamped(out))
}

fn patchify(img: &ImageBuffer, p: usize) -> DMatrix<f64> {
    let (tw, th) = (img.width / p, img.height / p);
    DMatrix::from_fn(p * p * 3, tw * th, |r, tok| {
        let (ty, tx) = (tok / tw, tok % tw);
        let (py, px, c) = (r / (3 * p), (r / 3) % p, r % 3);
        img.rgb[((ty * p + py) * img.width + tx * p + px) * 3 + c]
    })
}

fn unpatchify_into(cols: &DMatrix<f64>, p: usize, width: usize, out: &mut [f64]) {
    let tw = width / p;
    for (tok, col) in cols.column_iter().enumerate() {
        let (ty, tx) = (tok / tw, tok % tw);
        for (r, v) in col.iter().enumerate() {
            let (py, px, c) = (r / (3 * p), (r / 3) % p, r % 3);
            out[((ty * p + py) * width + tx * p + px) * 3 + c] = *v;
        }
    }
}

/// Everything from a noise prediction needed to differentiate it with respect
/// to the adapter.
#[derive(Clone, Debug)]
pub struct NoisePrediction {
    /// Interleaved RGB, same layout as [`ImageBuffer::rgb`].
    pub eps: Vec<f64>,
    pub decoder_input: Option<DMatrix<f64>>,
}

pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap, t: usize) -> Result<NoisePrediction>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub params: RefinerParams,
    pub adapter: LoraAdapter,
    pub optimizer: LoraOptimizer,
    pub schedule: NoiseSchedule,
}

impl Refiner {
    pub fn new(config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        let params = RefinerParams::new(&config);
        let adapter = LoraAdapter::new(config.patch_dim(), config.width, config.lora_rank, config.seed.wrapping_add(1))?;
        let optimizer = LoraOptimizer { a: AdamMoments::zeros_like(&adapter.a), b: AdamMoments::zeros_like(&adapter.b), step: 0 };
        Ok(Refiner { config, params, adapter, optimizer, schedule: NoiseSchedule::default() })
    }

    /// Resets the adapter to `B = 0` and clears its optimizer state.
    pub fn reset_adapter(&mut self) -> Result<()> {
        self.adapter = LoraAdapter::new(self.config.patch_dim(), self.config.width, self.config.lora_rank, self.config.seed.wrapping_add(1))?;
        self.optimizer = LoraOptimizer { a: AdamMoments::zeros_like(&self.adapter.a), b: AdamMoments::zeros_like(&self.adapter.b), step: 0 };
        Ok(())
    }

    fn check_image(&self, img: &ImageBuffer) -> Result<()> {
        let p = self.config.patch;
        if img.width % p != 0 || img.height % p != 0 || img.width == 0 || img.height == 0 {
            return Err(Error::InvalidInput(format!("image {}x{} is not a positive multiple of patch size {p}", img.width, img.height)));
        }
        Ok(())
    }

    fn embed(&self, img: &ImageBuffer, t: usize) -> Result<FeatureGrid> {
        let p = self.config.patch;
        let mut tokens = &self.params.embed * patchify(img, p);
        let bias = &self.params.embed_bias + self.params.time_table.column(t);
        for mut col in tokens.column_iter_mut() {
            col += &bias;
        }
        FeatureGrid::new(img.height / p, img.width / p, tokens)
    }

    /// Token features after all attention blocks.
    pub fn trunk(&self, x: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap, t: usize) -> Result<FeatureGrid> {
        self.check_image(x)?;
        if !x.same_dims(reference) || mask.width != x.width || mask.height != x.height {
            return Err(Error::InvalidInput("image, reference and mask dimensions differ".into()));
        }
        if t >= TIMESTEPS {
            return Err(Error::InvalidInput(format!("timestep {t} outside [0, {TIMESTEPS})")));
        }
        let token_mask = downsample_mask(mask, self.config.patch)?;
        let mut h = self.embed(x, t)?;
        let r = self.embed(reference, t)?;
        for layer in &self.params.layers {
            let a = masked_cross_attention(&h, &r, &h, &token_mask, layer)?;
            h.tokens += &layer.wo * a.tokens;
            let mut hidden = &layer.ff1 * &h.tokens;
            for mut col in hidden.column_iter_mut() {
                col += &layer.ff1_bias;
                col.apply(|v| *v = v.max(0.0));
            }
            let mut ff = &layer.ff2 * hidden;
            for mut col in ff.column_iter_mut() {
                col += &layer.ff2_bias;
            }
            h.tokens += ff;
        }
        Ok(h)
    }

    fn decode(&self, h: &DMatrix<f64>, width: usize, height: usize) -> Result<Vec<f64>> {
        let w = apply_lora(&self.params.decoder, &self.adapter)?;
        let mut out = w * h;
        for mut col in out.column_iter_mut() {
            col += &self.params.decoder_bias;
        }
        let mut eps = vec![0.0; width * height * 3];
        unpatchify_into(&out, self.config.patch, width, &mut eps);
        Ok(eps)
    }

    /// Single-step refinement at the configured inference timestep.
    pub fn refine(&self, rendered: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap) -> Result<ImageBuffer> {
        Ok(self.refine_with_cache(rendered, reference, mask)?.0)
    }

    /// Refined image plus the noise prediction it was derived from.
    pub fn refine_with_cache(&self, rendered: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap) -> Result<(ImageBuffer, NoisePrediction)> {
        let t = self.config.inference_t;
        let ab = self.schedule.alpha_bar(t)?;
        let (sa, sigma) = (ab.sqrt(), self.schedule.sigma(t)?);
        let x_t = ImageBuffer { width: rendered.width, height: rendered.height, rgb: rendered.rgb.iter().map(|v| sa * v).collect() };
        let pred = self.predict_noise(&x_t, reference, mask, t)?;
        let rgb = rendered.rgb.iter().zip(&pred.eps).map(|(x, e)| (x - sigma / sa * e).clamp(0.0, 1.0)).collect();
        Ok((ImageBuffer { width: rendered.width, height: rendered.height, rgb }, pred))
    }

    /// Gradient of a loss on the adapter given its gradient on the predicted
    /// noise.
    pub fn lora_grad(&self, pred: &NoisePrediction, d_eps: &[f64], width: usize) -> Result<LoraGrad> {
        let h = pred
            .decoder_input
            .as_ref()
            .ok_or_else(|| Error::InvalidState("noise prediction carries no decoder cache".into()))?;
        if d_eps.len() != pred.eps.len() {
            return Err(Error::InvalidInput("noise gradient has the wrong length".into()));
        }
        let height = d_eps.len() / 3 / width;
        let img = ImageBuffer { width, height, rgb: d_eps.to_vec() };
        let g_out = patchify(&img, self.config.patch);
        let r = self.adapter.rank() as f64;
        let ah = &self.adapter.a * h;
        Ok(LoraGrad { b: &g_out * ah.transpose() / r, a: self.adapter.b.transpose() * &g_out * h.transpose() / r })
    }

    /// Adapter gradient from a gradient on the output of [`Refiner::refine`].
    pub fn lora_grad_from_refined(&self, refined: &ImageBuffer, pred: &NoisePrediction, rendered: &ImageBuffer, d_out: &[f64]) -> Result<LoraGrad> {
        let t = self.config.inference_t;
        let ratio = self.schedule.sigma(t)? / self.schedule.alpha_bar(t)?.sqrt();
        let d_eps: Vec<f64> = d_out
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let raw = rendered.rgb[i] - ratio * pred.eps[i];
                if (0.0..=1.0).contains(&raw) && refined.rgb[i] == raw {
                    -ratio * g
                } else {
                    0.0
                }
            })
            .collect();
        self.lora_grad(pred, &d_eps, refined.width)
    }

    /// One Adam step on the adapter; the base weights never change.
    pub fn lora_step(&mut self, grad: &LoraGrad, lr: f64) -> Result<()> {
        if grad.a.shape() != self.adapter.a.shape() || grad.b.shape() != self.adapter.b.shape() {
            return Err(Error::InvalidInput("LoRA gradient shape mismatch".into()));
        }
        if grad.a.iter().chain(grad.b.iter()).all(|v| *v == 0.0) {
            return Ok(());
        }
        self.optimizer.step += 1;
        let step = self.optimizer.step;
        self.optimizer.a.step(&mut self.adapter.a, &grad.a, lr, step);
        self.optimizer.b.step(&mut self.adapter.b, &grad.b, lr, step);
        Ok(())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut tf = TensorFile::default();
        let put = |tf: &mut TensorFile, name: String, m: &DMatrix<f64>| {
            // Row-major, as stored by most tensor tooling.
            tf.insert(name, vec![m.nrows(), m.ncols()], m.transpose().iter().copied().collect());
        };
        let p = &self.params;
        put(&mut tf, "embed.weight".into(), &p.embed);
        tf.insert_vec("embed.bias", p.embed_bias.iter().copied().collect());
        for (i, l) in p.layers.iter().enumerate() {
            for (n, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("ff1", &l.ff1), ("ff2", &l.ff2)] {
                put(&mut tf, format!("layers.{i}.{n}"), m);
            }
            tf.insert_vec(format!("layers.{i}.ff1_bias"), l.ff1_bias.iter().copied().collect());
            tf.insert_vec(format!("layers.{i}.ff2_bias"), l.ff2_bias.iter().copied().collect());
        }
        put(&mut tf, "decoder.weight".into(), &p.decoder);
        tf.insert_vec("decoder.bias", p.decoder_bias.iter().copied().collect());
        put(&mut tf, "time_table".into(), &p.time_table);
        put(&mut tf, "lora.a".into(), &self.adapter.a);
        put(&mut tf, "lora.b".into(), &self.adapter.b);
        put(&mut tf, "lora.adam.a.m".into(), &self.optimizer.a.m);
        put(&mut tf, "lora.adam.a.v".into(), &self.optimizer.a.v);
        put(&mut tf, "lora.adam.b.m".into(), &self.optimizer.b.m);
        put(&mut tf, "lora.adam.b.v".into(), &self.optimizer.b.v);
        tf.metadata.insert("config".into(), serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?);
        tf.metadata.insert("lora.step".into(), self.optimizer.step.to_string());
        Ok(tf)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let config: RefinerConfig = serde_json::from_str(tf.meta("config")?).map_err(|e| Error::Config(e.to_string()))?;
        let mut r = Refiner::new(config)?;
        let get = |name: &str, like: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let (shape, data) = tf.tensors.get(name).ok_or_else(|| Error::InvalidInput(format!("tensor '{name}' missing")))?;
            if shape.as_slice() != [like.nrows(), like.ncols()] {
                return Err(Error::InvalidInput(format!("tensor '{name}' has shape {shape:?}")));
            }
            Ok(DMatrix::from_row_slice(like.nrows(), like.ncols(), data))
        };
        let vec = |name: &str, n: usize| -> Result<DVector<f64>> {
            let d = tf.get(name)?;
            if d.len() != n {
                return Err(Error::InvalidInput(format!("tensor '{name}' has length {}", d.len())));
            }
            Ok(DVector::from_column_slice(d))
        };
        let p = &mut r.params;
        p.embed = get("embed.weight", &p.embed)?;
        p.embed_bias = vec("embed.bias", p.embed_bias.len())?;
        for (i, l) in p.layers.iter_mut().enumerate() {
            l.wq = get(&format!("layers.{i}.wq"), &l.wq)?;
            l.wk = get(&format!("layers.{i}.wk"), &l.wk)?;
            l.wv = get(&format!("layers.{i}.wv"), &l.wv)?;
            l.wo = get(&format!("layers.{i}.wo"), &l.wo)?;
            l.ff1 = get(&format!("layers.{i}.ff1"), &l.ff1)?;
            l.ff2 = get(&format!("layers.{i}.ff2"), &l.ff2)?;
            l.ff1_bias = vec(&format!("layers.{i}.ff1_bias"), l.ff1_bias.len())?;
            l.ff2_bias = vec(&format!("layers.{i}.ff2_bias"), l.ff2_bias.len())?;
        }
        p.decoder = get("decoder.weight", &p.decoder)?;
        p.decoder_bias = vec("decoder.bias", p.decoder_bias.len())?;
        p.time_table = get("time_table", &p.time_table)?;
        r.adapter.a = get("lora.a", &r.adapter.a)?;
        r.adapter.b = get("lora.b", &r.adapter.b)?;
        r.optimizer.a.m = get("lora.adam.a.m", &r.adapter.a)?;
        r.optimizer.a.v = get("lora.adam.a.v", &r.adapter.a)?;
        r.optimizer.b.m = get("lora.adam.b.m", &r.adapter.b)?;
        r.optimizer.b.v = get("lora.adam.b.v", &r.adapter.b)?;
        r.optimizer.step = tf.meta("lora.step")?.parse().map_err(|_| Error::InvalidInput("bad lora.step".into()))?;
        if !r.params.is_finite() {
            return Err(Error::InvalidInput("refiner checkpoint contains non-finite weights".into()));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

impl NoisePredictor for Refiner {
    fn predict_noise(&self, x_t: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap, t: usize) -> Result<NoisePrediction> {
        let h = self.trunk(x_t, reference, mask, t)?;
        let eps = self.decode(&h.tokens, x_t.width, x_t.height)?;
        Ok(NoisePrediction { eps, decoder_input: Some(h.tokens) })
    }
}

/// Score-distillation signal for a pseudo-view render.
#[derive(Clone, Debug)]
pub struct SdsOutput {
    /// Mean squared noise residual.
    pub loss: f64,
    /// `residual · √ᾱ_t`, routed to the rasterizer.
    pub d_image: Vec<f64>,
    pub residual: Vec<f64>,
    pub prediction: NoisePrediction,
}

/// Noises `image` to timestep `t`, predicts the noise conditioned on
/// `reference` (cross-attention fully engaged) and returns the residual.
pub fn sds_loss(
    predictor: &dyn NoisePredictor,
    image: &ImageBuffer,
    reference: &ImageBuffer,
    t: usize,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<SdsOutput> {
    let ab = schedule.alpha_bar(t)?;
    let (sa, sigma) = (ab.sqrt(), schedule.sigma(t)?);
    if noise.len() != image.rgb.len() {
        return Err(Error::InvalidInput("noise and image sizes differ".into()));
    }
    let x_t = ImageBuffer {
        width: image.width,
        height: image.height,
        rgb: image.rgb.iter().zip(noise).map(|(x, e)| sa * x + sigma * e).collect(),
    };
    let full = ScalarMap::filled(image.width, image.height, 1.0);
    let prediction = predictor.predict_noise(&x_t, reference, &full, t)?;
    let residual: Vec<f64> = prediction.eps.iter().zip(noise).map(|(p, e)| p - e).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
    let d_image = residual.iter().map(|r| r * sa).collect();
    Ok(SdsOutput { loss, d_image, residual, prediction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        FeatureGrid::new(h, w, DMatrix::from_fn(d, h * w, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, d: usize) -> AttentionLayer {
        let mut m = || DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        AttentionLayer {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
            ff1: m(),
            ff1_bias: DVector::zeros(d),
            ff2: m(),
            ff2_bias: DVector::zeros(d),
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer { width: w, height: h, rgb: (0..w * h * 3).map(|_| rng.random::<f64>()).collect() }
    }

    fn brute_attention(q: &FeatureGrid, kv: &FeatureGrid, l: &AttentionLayer) -> Vec<Vec<f64>> {
        let d = q.d();
        let proj = |m: &DMatrix<f64>, x: &FeatureGrid, j: usize| -> Vec<f64> {
            (0..d).map(|r| (0..d).map(|c| m[(r, c)] * x.tokens[(c, j)]).sum()).collect()
        };
        (0..q.len())
            .map(|i| {
                let qi = proj(&l.wq, q, i);
                let logits: Vec<f64> = (0..kv.len())
                    .map(|j| {
                        let kj = proj(&l.wk, kv, j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                let mut out = vec![0.0; d];
                for (j, lg) in logits.iter().enumerate() {
                    let vj = proj(&l.wv, kv, j);
                    for c in 0..d {
                        out[c] += lg.exp() / z * vj[c];
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn attention_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_grid(&mut rng, 4, 4, 8);
        let kv = random_grid(&mut rng, 4, 4, 8);
        let l = random_layer(&mut rng, 8);
        let fast = cross_attention(&q, &kv, &l).unwrap();
        let slow = brute_attention(&q, &kv, &l);
        for i in 0..16 {
            for c in 0..8 {
                assert!((fast.tokens[(c, i)] - slow[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_blend_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_grid(&mut rng, 3, 5, 8);
        let kv = random_grid(&mut rng, 3, 5, 8);
        let l = random_layer(&mut rng, 8);
        let cross = cross_attention(&q, &kv, &l).unwrap();
        let own = self_attention(&q, &l).unwrap();
        let zero = masked_cross_attention(&q, &kv, &q, &TransientMask::zeros(5, 3), &l).unwrap();
        let one = masked_cross_attention(&q, &kv, &q, &TransientMask::filled(5, 3, 1.0), &l).unwrap();
        let half = masked_cross_attention(&q, &kv, &q, &TransientMask::filled(5, 3, 0.5), &l).unwrap();
        assert_eq!(zero.tokens, own.tokens);
        assert_eq!(one.tokens, cross.tokens);
        let mean = (&cross.tokens + &own.tokens) / 2.0;
        assert!((half.tokens - mean).amax() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_grid(&mut rng, 2, 3, 8);
        let kv = random_grid(&mut rng, 2, 3, 8);
        let l = random_layer(&mut rng, 8);
        let p = attention_weights(&q, &kv, &l);
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let mut logits = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3);
        let mut shifted = logits.add_scalar(17.0);
        softmax_rows(&mut logits);
        softmax_rows(&mut shifted);
        assert!((logits - shifted).amax() < 1e-12);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_grid(&mut rng, 2, 2, 8);
        let kv = random_grid(&mut rng, 2, 2, 6);
        let l = random_layer(&mut rng, 8);
        assert!(cross_attention(&q, &kv, &l).is_err());
    }

    #[test]
    fn lora_closed_forms() {
        let base = DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64);
        let zero = LoraAdapter { a: DMatrix::from_element(2, 3, 0.7), b: DMatrix::zeros(3, 2) };
        assert_eq!(apply_lora(&base, &zero).unwrap(), base);
        let mut a = DMatrix::zeros(1, 3);
        a[(0, 0)] = 1.0;
        let mut b = DMatrix::zeros(3, 1);
        b[(0, 0)] = 1.0;
        let rank1 = apply_lora(&base, &LoraAdapter { a, b }).unwrap();
        let mut expect = base.clone();
        expect[(0, 0)] += 1.0;
        assert_eq!(rank1, expect);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let base = DMatrix::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
        let got = apply_lora(&base, &LoraAdapter { a: a.clone(), b: b.clone() }).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let dense: f64 = (0..4).map(|k| b[(i, k)] * a[(k, j)]).sum();
                assert!((got[(i, j)] - (base[(i, j)] + dense / 4.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_identity_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        for t in 0..1000 {
            let sig = s.sigma(t).unwrap();
            assert!((s.alpha_bar(t).unwrap() + sig * sig - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            }
        }
        assert!(s.alpha_bar[0] > 0.999 && s.alpha_bar[999] < 1e-3);
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn zero_decoder_refiner_is_identity() {
        let r = Refiner::new(RefinerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 16, 12);
        let reference = random_image(&mut rng, 16, 12);
        let out = r.refine(&x, &reference, &ScalarMap::filled(16, 12, 0.3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn refine_rejects_unaligned_sizes() {
        let r = Refiner::new(RefinerConfig::default()).unwrap();
        let x = ImageBuffer::new(10, 12);
        assert!(matches!(r.refine(&x, &x, &ScalarMap::new(10, 12)), Err(Error::InvalidInput(_))));
    }

    fn random_decoder_refiner(seed: u64) -> Refiner {
        let mut r = Refiner::new(RefinerConfig { seed, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = r.params.decoder.shape();
        r.params.decoder = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.3..0.3));
        r
    }

    #[test]
    fn cross_path_changes_output_seed_9() {
        let r = random_decoder_refiner(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(&mut rng, 16, 16);
        let reference = random_image(&mut rng, 16, 16);
        let a = r.refine(&x, &reference, &ScalarMap::new(16, 16)).unwrap();
        let b = r.refine(&x, &reference, &ScalarMap::filled(16, 16, 1.0)).unwrap();
        assert_ne!(a, b);
        assert!(b.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fresh_adapter_matches_base_and_one_step_changes_output() {
        let mut r = random_decoder_refiner(10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_image(&mut rng, 16, 16);
        let reference = random_image(&mut rng, 16, 16);
        let mask = ScalarMap::filled(16, 16, 0.5);
        let mut base = r.clone();
        base.adapter.a.fill(0.0);
        let with = r.refine(&x, &reference, &mask).unwrap();
        let without = base.refine(&x, &reference, &mask).unwrap();
        assert!(with.rgb.iter().zip(&without.rgb).all(|(a, b)| (a - b).abs() < 1e-6));

        let zero = LoraGrad { a: DMatrix::zeros(4, 32), b: DMatrix::zeros(48, 4) };
        let before = r.adapter.clone();
        r.lora_step(&zero, 1e-4).unwrap();
        assert_eq!(r.adapter, before);

        let (refined, pred) = r.refine_with_cache(&x, &reference, &mask).unwrap();
        let d_out: Vec<f64> = refined.rgb.iter().map(|v| v - 0.5).collect();
        let g = r.lora_grad_from_refined(&refined, &pred, &x, &d_out).unwrap();
        r.lora_step(&g, 1e-2).unwrap();
        assert!(r.adapter.b.iter().any(|v| *v != 0.0));
        assert_ne!(r.refine(&x, &reference, &mask).unwrap(), refined);
    }

    #[test]
    fn lora_gradient_matches_finite_differences_on_2x2_tokens() {
        let mut r = random_decoder_refiner(11);
        r.params.decoder *= 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        r.adapter.b = DMatrix::from_fn(48, 4, |_, _| rng.random_range(-0.02..0.02));
        // Keep the output away from the clamp so the loss is smooth.
        let x = ImageBuffer { width: 8, height: 8, rgb: (0..192).map(|_| rng.random_range(0.4..0.6)).collect() };
        let reference = random_image(&mut rng, 8, 8);
        let mask = ScalarMap::filled(8, 8, 0.7);
        let target: Vec<f64> = (0..192).map(|_| rng.random::<f64>()).collect();
        let loss = |r: &Refiner| -> f64 {
            let out = r.refine(&x, &reference, &mask).unwrap();
            out.rgb.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let (refined, pred) = r.refine_with_cache(&x, &reference, &mask).unwrap();
        assert!(refined.rgb.iter().all(|v| *v > 0.0 && *v < 1.0));
        let d_out: Vec<f64> = refined.rgb.iter().zip(&target).map(|(a, b)| a - b).collect();
        let g = r.lora_grad_from_refined(&refined, &pred, &x, &d_out).unwrap();
        let h = 1e-4;
        for (i, j) in [(0, 0), (1, 5), (3, 31), (2, 17)] {
            let mut p = r.clone();
            p.adapter.a[(i, j)] += h;
            let mut m = r.clone();
            m.adapter.a[(i, j)] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.a[(i, j)];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "A[{i},{j}]: fd {fd} vs {an}");
        }
        for (i, j) in [(0, 0), (47, 3), (20, 1)] {
            let mut p = r.clone();
            p.adapter.b[(i, j)] += h;
            let mut m = r.clone();
            m.adapter.b[(i, j)] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.b[(i, j)];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "B[{i},{j}]: fd {fd} vs {an}");
        }
    }

    struct PerfectDenoiser(Vec<f64>);

    impl NoisePredictor for PerfectDenoiser {
        fn predict_noise(&self, _: &ImageBuffer, _: &ImageBuffer, _: &ScalarMap, _: usize) -> Result<NoisePrediction> {
            Ok(NoisePrediction { eps: self.0.clone(), decoder_input: None })
        }
    }

    #[test]
    fn sds_vanishes_for_perfect_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_image(&mut rng, 8, 8);
        let n = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<f64> = (0..192).map(|_| n.sample(&mut rng)).collect();
        let out = sds_loss(&PerfectDenoiser(noise.clone()), &x, &x, 500, &noise, &NoiseSchedule::default()).unwrap();
        assert!(out.loss < 1e-10);
        assert!(out.d_image.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sds_matches_direct_formula_seed_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_decoder_refiner(4);
        let x = random_image(&mut rng, 8, 8);
        let reference = random_image(&mut rng, 8, 8);
        let n = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<f64> = (0..192).map(|_| n.sample(&mut rng)).collect();
        let s = NoiseSchedule::default();
        let t = 321;
        let out = sds_loss(&r, &x, &reference, t, &noise, &s).unwrap();
        let ab = s.alpha_bar[t];
        let x_t = ImageBuffer { width: 8, height: 8, rgb: (0..192).map(|i| ab.sqrt() * x.rgb[i] + (1.0 - ab).sqrt() * noise[i]).collect() };
        let eps = r.predict_noise(&x_t, &reference, &ScalarMap::filled(8, 8, 1.0), t).unwrap().eps;
        let mut total = 0.0;
        for i in 0..192 {
            let res = eps[i] - noise[i];
            total += res * res;
            assert!((out.d_image[i] - res * ab.sqrt()).abs() < 1e-12);
        }
        assert!((out.loss - total / 192.0).abs() < 1e-12);
        assert!(sds_loss(&r, &x, &reference, 1000, &noise, &s).is_err());
    }

    #[test]
    fn sds_near_zero_timestep_barely_noises() {
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar[0] - 1.0).abs() < 1e-3);
        assert!(s.sigma(0).unwrap() < 0.011);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = random_decoder_refiner(13);
        r.adapter.b[(3, 1)] = 0.25;
        r.optimizer.step = 7;
        r.optimizer.a.m[(0, 0)] = 1.5;
        let tf = r.to_tensor_file().unwrap();
        let back = Refiner::from_tensor_file(&TensorFile::from_bytes(&tf.to_bytes().unwrap(), "mem").unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
