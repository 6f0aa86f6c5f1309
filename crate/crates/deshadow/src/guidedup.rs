//! Guided refinement: recombine the generation's low-frequency (shadow-free)
//! lighting with the input's high-frequency detail, plus the degradation
//! augmentation and the optional learned residual refiner.
//!
//! The band split used here is an exact block-mean projection (P*P = P), so
//! the compositing identities hold to float rounding: the refined image's low
//! band equals the generation's and its high band equals the input's.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, resample_area, resize_bilinear, split_frequency, Image};
use crate::nn::adam::{ema_update, Adam};
use crate::nn::ops::{conv3x3, conv3x3_backward, silu, silu_backward};
use crate::nn::{randn, Tensor3};

/// Learned-refiner architecture: three 3x3 convs over stacked input +
/// low-band-of-generation channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub hidden: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

impl RefinerConfig {
    pub fn n_params(&self) -> usize {
        let h = self.hidden;
        (h * 6 * 9 + h) + (h * h * 9 + h) + (3 * h * 9 + 3)
    }
}

/// Weights of the learned residual refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    pub weights: Vec<f32>,
}

impl RefinerParams {
    pub fn fresh(config: RefinerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mut weights = Vec::with_capacity(config.n_params());
        let mut conv = |ci: usize, co: usize, scale: f64, rng: &mut ChaCha8Rng| {
            let std = scale * (2.0 / (ci * 9) as f64).sqrt();
            for _ in 0..co * ci * 9 {
                weights.push((randn(rng) * std) as f32);
            }
            for _ in 0..co {
                weights.push(0.0);
            }
        };
        conv(6, h, 1.0, &mut rng);
        conv(h, h, 1.0, &mut rng);
        // Near-zero last layer: the learned mode starts at the baseline.
        conv(h, 3, 0.01, &mut rng);
        Self { config, weights }
    }
}

/// Refinement mode: pure frequency compositing, or compositing plus a learned
/// residual correction.
#[derive(Debug, Clone)]
pub enum RefineMode {
    Baseline,
    Learned(RefinerParams),
}

/// Refinement configuration. `sigma` is the frequency-split bandwidth; the
/// block size of the projection is `max(1, round(2*sigma))`.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub sigma: f32,
    pub mode: RefineMode,
}

impl RefineConfig {
    pub fn baseline(sigma: f32) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "refine sigma must be > 0, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            mode: RefineMode::Baseline,
        })
    }

    pub fn block_size(&self) -> usize {
        ((2.0 * self.sigma).round() as usize).max(1)
    }

    /// Default bandwidth: 3.0 at 256 px, scaled linearly with resolution.
    pub fn default_sigma(resolution: usize) -> f32 {
        3.0 * resolution as f32 / 256.0
    }
}

/// Exact block-mean low-pass projection: averages within k x k cells
/// (ragged edge cells keep their own mean) and replicates back.
pub fn block_mean_projection(img: &Image, k: usize) -> Image {
    if k <= 1 {
        return img.clone();
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Image::zeros(w, h, ch);
    for by in (0..h).step_by(k) {
        let y1 = (by + k).min(h);
        for bx in (0..w).step_by(k) {
            let x1 = (bx + k).min(w);
            let n = ((y1 - by) * (x1 - bx)) as f64;
            for c in 0..ch {
                let mut mean = 0.0f64;
                for y in by..y1 {
                    for x in bx..x1 {
                        mean += img.get(x, y, c) as f64;
                    }
                }
                let mean = (mean / n) as f32;
                for y in by..y1 {
                    for x in bx..x1 {
                        out.set(x, y, c, mean);
                    }
                }
            }
        }
    }
    out
}

/// Restores input detail onto a generation: the generation's low band plus
/// the input's high band on the foreground, the input untouched elsewhere.
/// A generation at a different resolution is bilinearly upsampled first.
pub fn refine(input: &Image, generation: &Image, mask: &Image, cfg: &RefineConfig) -> Result<Image> {
    if mask.channels() != 1 || mask.width() != input.width() || mask.height() != input.height() {
        return Err(Error::DimensionMismatch(
            "mask must be 1-channel at input resolution".into(),
        ));
    }
    let generation = if generation.width() == input.width()
        && generation.height() == input.height()
    {
        generation.clone()
    } else {
        resize_bilinear(generation, input.width(), input.height())?
    };
    if generation.channels() != input.channels() {
        return Err(Error::DimensionMismatch(
            "input and generation must share channel count".into(),
        ));
    }

    let k = cfg.block_size();
    let low_gen = block_mean_projection(&generation, k);
    let low_in = block_mean_projection(input, k);

    let (w, h, ch) = (input.width(), input.height(), input.channels());
    let mut base = input.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) > 0.0 {
                for c in 0..ch {
                    let v = low_gen.get(x, y, c) + (input.get(x, y, c) - low_in.get(x, y, c));
                    base.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }

    match &cfg.mode {
        RefineMode::Baseline => Ok(base),
        RefineMode::Learned(params) => {
            let residual = refiner_forward(params, input, &low_gen);
            let mut out = base;
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y, 0) > 0.0 {
                        for c in 0..ch {
                            let v = out.get(x, y, c) + residual.get(x, y, c);
                            out.set(x, y, c, v.clamp(0.0, 1.0));
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

fn stack_refiner_input(input: &Image, low_gen: &Image) -> Tensor3<f32> {
    let (w, h) = (input.width(), input.height());
    let mut data = Vec::with_capacity(6 * w * h);
    for img in [input, low_gen] {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(2.0 * img.get(x, y, c) - 1.0);
                }
            }
        }
    }
    Tensor3::from_data(6, h, w, data)
}

fn refiner_ranges(cfg: &RefinerConfig) -> [(usize, usize); 6] {
    let h = cfg.hidden;
    let mut off = 0usize;
    let mut next = |len: usize| {
        let r = (off, len);
        off += len;
        r
    };
    [
        next(h * 6 * 9),
        next(h),
        next(h * h * 9),
        next(h),
        next(3 * h * 9),
        next(3),
    ]
}

fn refiner_forward(params: &RefinerParams, input: &Image, low_gen: &Image) -> Image {
    let x = stack_refiner_input(input, low_gen);
    let (out, _) = refiner_forward_tensor(params, &x);
    let (w, h) = (input.width(), input.height());
    let mut img = Image::zeros(w, h, 3);
    for c in 0..3 {
        let plane = out.plane(c);
        for y in 0..h {
            for x2 in 0..w {
                img.set(x2, y, c, plane[y * w + x2]);
            }
        }
    }
    img
}

struct RefinerCache {
    x: Tensor3<f32>,
    h1: Tensor3<f32>,
    a1: Tensor3<f32>,
    h2: Tensor3<f32>,
    a2: Tensor3<f32>,
}

fn refiner_forward_tensor(params: &RefinerParams, x: &Tensor3<f32>) -> (Tensor3<f32>, RefinerCache) {
    let hid = params.config.hidden;
    let r = refiner_ranges(&params.config);
    let seg = |i: usize| &params.weights[r[i].0..r[i].0 + r[i].1];
    let h1 = conv3x3(x, seg(0), seg(1), hid);
    let a1 = silu(&h1);
    let h2 = conv3x3(&a1, seg(2), seg(3), hid);
    let a2 = silu(&h2);
    let out = conv3x3(&a2, seg(4), seg(5), 3);
    (
        out,
        RefinerCache {
            x: x.clone(),
            h1,
            a1,
            h2,
            a2,
        },
    )
}

fn refiner_backward(
    params: &RefinerParams,
    cache: &RefinerCache,
    d_out: &Tensor3<f32>,
) -> Vec<f32> {
    let r = refiner_ranges(&params.config);
    let seg = |i: usize| &params.weights[r[i].0..r[i].0 + r[i].1];
    let mut grads = vec![0.0f32; params.weights.len()];
    // Split grads into non-overlapping segment views.
    let (g01, rest) = grads.split_at_mut(r[2].0);
    let (g0, g1) = g01.split_at_mut(r[1].0);
    let (g23, g45) = rest.split_at_mut(r[4].0 - r[2].0);
    let (g2, g3) = g23.split_at_mut(r[3].0 - r[2].0);
    let (g4, g5) = g45.split_at_mut(r[5].0 - r[4].0);

    let d_a2 = conv3x3_backward(&cache.a2, seg(4), d_out, g4, g5);
    let d_h2 = silu_backward(&cache.h2, &d_a2);
    let d_a1 = conv3x3_backward(&cache.a1, seg(2), &d_h2, g2, g3);
    let d_h1 = silu_backward(&cache.h1, &d_a1);
    let _ = conv3x3_backward(&cache.x, seg(0), &d_h1, g0, g1);
    grads
}

/// Deterministic degradation: down-up resampling, then Gaussian blur, then
/// additive Gaussian noise, each scaled by `strength` in [0, 1].
pub fn degrade(img: &Image, seed: u64, strength: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "degrade strength must lie in [0,1], got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = (1.0 + rng.gen::<f32>() * (4.0 * strength - 1.0).max(0.0)).round() as usize;
    let sigma = rng.gen::<f32>() * 2.0 * strength;
    let noise_std = rng.gen::<f32>() * 0.05 * strength;

    let mut out = img.clone();
    if factor > 1 {
        let (dw, dh) = (
            (img.width() / factor).max(1),
            (img.height() / factor).max(1),
        );
        let down = resample_area(&out, dw, dh)?;
        out = resize_bilinear(&down, img.width(), img.height())?;
    }
    if sigma > 0.0 {
        out = gaussian_blur(&out, sigma)?;
    }
    if noise_std > 0.0 {
        let data: Vec<f32> = out
            .data()
            .iter()
            .map(|&v| (v + noise_std * randn(&mut rng) as f32).clamp(0.0, 1.0))
            .collect();
        out = Image::new(img.width(), img.height(), img.channels(), data)?;
    }
    Ok(out)
}

/// One refiner training record: the sharp input under the original lighting,
/// a degraded stand-in for the diffusion output, and the sharp relit target.
#[derive(Debug, Clone)]
pub struct RefinerTriple {
    pub clean: Image,
    pub degraded: Image,
    pub relit_clean: Image,
}

/// Refiner training hyperparameters.
#[derive(Debug, Clone)]
pub struct RefinerTrainConfig {
    pub sigma: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub ema_decay: f32,
    /// Weight of the finite-difference gradient loss term.
    pub grad_weight: f32,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            lr: 1e-3,
            steps: 300,
            batch: 4,
            seed: 0,
            ema_decay: 0.99,
            grad_weight: 1.0,
        }
    }
}

/// L2 plus gradient loss between `pred` and `target`, with the gradient of
/// the loss with respect to `pred`.
fn refiner_loss(pred: &Tensor3<f32>, target: &Tensor3<f32>, grad_weight: f32) -> (f64, Tensor3<f32>) {
    let n = pred.numel() as f64;
    let mut loss = 0.0f64;
    let mut d = vec![0.0f32; pred.numel()];
    for i in 0..pred.numel() {
        let r = pred.data[i] - target.data[i];
        loss += (r as f64) * (r as f64);
        d[i] += 2.0 * r / n as f32;
    }
    loss /= n;

    // Forward-difference gradient maps, matched between pred and target.
    let (ch, h, w) = (pred.ch, pred.h, pred.w);
    let mut gloss = 0.0f64;
    let ng = (ch * h * w) as f64;
    for c in 0..ch {
        let p = pred.plane(c);
        let t = target.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let gp = p[i + 1] - p[i];
                    let gt = t[i + 1] - t[i];
                    let r = gp - gt;
                    gloss += (r as f64) * (r as f64);
                    let g = 2.0 * grad_weight * r / ng as f32;
                    d[c * h * w + i + 1] += g;
                    d[c * h * w + i] -= g;
                }
                if y + 1 < h {
                    let gp = p[i + w] - p[i];
                    let gt = t[i + w] - t[i];
                    let r = gp - gt;
                    gloss += (r as f64) * (r as f64);
                    let g = 2.0 * grad_weight * r / ng as f32;
                    d[c * h * w + i + w] += g;
                    d[c * h * w + i] -= g;
                }
            }
        }
    }
    loss += grad_weight as f64 * gloss / ng;
    (loss, Tensor3::from_data(ch, h, w, d))
}

/// Trains the learned refiner on (clean, degraded, relit-clean) triples:
/// the network learns the residual between the baseline compositing of
/// (clean, degraded) and the sharp relit target. Deterministic from the seed.
pub fn train_refiner(
    triples: &[RefinerTriple],
    cfg: &RefinerTrainConfig,
    init: Option<&RefinerParams>,
    log_path: Option<&Path>,
) -> Result<(RefinerParams, Vec<f64>)> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument(
            "refiner training needs at least one triple".into(),
        ));
    }
    let refine_cfg = RefineConfig::baseline(cfg.sigma)?;
    let k = refine_cfg.block_size();

    // Precompute per-triple tensors: network input, baseline composite, target.
    struct Prepared {
        stacked: Tensor3<f32>,
        baseline: Tensor3<f32>,
        target: Tensor3<f32>,
    }
    let prepared: Vec<Prepared> = triples
        .par_iter()
        .map(|tr| {
            let low_gen = block_mean_projection(&tr.degraded, k);
            let low_in = block_mean_projection(&tr.clean, k);
            let base = {
                let (w, h, ch) = (tr.clean.width(), tr.clean.height(), tr.clean.channels());
                let mut data = vec![0.0f32; ch * h * w];
                for c in 0..ch {
                    for y in 0..h {
                        for x in 0..w {
                            data[(c * h + y) * w + x] = low_gen.get(x, y, c)
                                + (tr.clean.get(x, y, c) - low_in.get(x, y, c));
                        }
                    }
                }
                Tensor3::from_data(ch, h, w, data)
            };
            let target = {
                let (w, h, ch) = (
                    tr.relit_clean.width(),
                    tr.relit_clean.height(),
                    tr.relit_clean.channels(),
                );
                let mut data = vec![0.0f32; ch * h * w];
                for c in 0..ch {
                    for y in 0..h {
                        for x in 0..w {
                            data[(c * h + y) * w + x] = tr.relit_clean.get(x, y, c);
                        }
                    }
                }
                Tensor3::from_data(ch, h, w, data)
            };
            Prepared {
                stacked: stack_refiner_input(&tr.clean, &low_gen),
                baseline: base,
                target,
            }
        })
        .collect();

    let mut params = match init {
        Some(p) => p.clone(),
        None => RefinerParams::fresh(RefinerConfig::default(), cfg.seed),
    };
    let mut ema = params.weights.clone();
    let mut adam = Adam::new(params.weights.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4EF1_4E5E_ED00_0001);
    let mut losses = Vec::with_capacity(cfg.steps);

    let mut log = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "step,loss,lr,stage").map_err(|e| Error::io(p, e))?;
            Some((f, p.to_path_buf()))
        }
        None => None,
    };

    for step in 0..cfg.steps {
        let idxs: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..prepared.len()))
            .collect();
        let per_item: Vec<(f64, Vec<f32>)> = idxs
            .par_iter()
            .map(|&i| {
                let pr = &prepared[i];
                let (res, cache) = refiner_forward_tensor(&params, &pr.stacked);
                let pred = Tensor3::from_data(
                    res.ch,
                    res.h,
                    res.w,
                    res.data
                        .iter()
                        .zip(&pr.baseline.data)
                        .map(|(r, b)| r + b)
                        .collect(),
                );
                let (loss, d_pred) = refiner_loss(&pred, &pr.target, cfg.grad_weight);
                let grads = refiner_backward(&params, &cache, &d_pred);
                (loss, grads)
            })
            .collect();

        let n = per_item.len() as f64;
        let mut grads = vec![0.0f32; params.weights.len()];
        let mut loss = 0.0f64;
        for (l, g) in &per_item {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi / n as f32;
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                quantity: "loss",
                layer: "refiner".into(),
                step: step as u64,
            });
        }
        adam.update(&mut params.weights, &grads, cfg.lr);
        ema_update(&mut ema, &params.weights, cfg.ema_decay);
        losses.push(loss);
        if let Some((f, p)) = &mut log {
            writeln!(f, "{step},{loss},{},refiner", cfg.lr)
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
    }
    params.weights = ema;
    Ok((params, losses))
}
