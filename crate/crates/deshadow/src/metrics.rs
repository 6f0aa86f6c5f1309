//! Quantitative evaluation: SSIM, PSNR, a gradient-based perceptual proxy,
//! foreground-composited scoring, and shadow-consistency statistics.
//!
//! The perceptual proxy stands in for learned perceptual metrics and is not
//! comparable to published LPIPS numbers; reports label it `proxy`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{resample_area, Image};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filtering of an f64 map with the SSIM window.
fn window_filter(map: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0f64; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * map[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn luma_f64(img: &Image) -> Vec<f64> {
    img.to_luma().data().iter().map(|&v| v as f64).collect()
}

/// Structural similarity over Rec.601 luma: 11x11 Gaussian window with
/// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, averaged over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) && !(a.width() == b.width() && a.height() == b.height()) {
        return Err(Error::DimensionMismatch("ssim inputs must match".into()));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let la = luma_f64(a);
    let lb = luma_f64(b);
    let sq_a: Vec<f64> = la.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let mu_a = window_filter(&la, w, h);
    let mu_b = window_filter(&lb, w, h);
    let e_aa = window_filter(&sq_a, w, h);
    let e_bb = window_filter(&sq_b, w, h);
    let e_ab = window_filter(&ab, w, h);

    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Peak signal-to-noise ratio in dB over all channels, for values in [0,1].
/// The MSE is floored at 1e-10, capping the result at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("psnr inputs must match".into()));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-10)).log10())
}

/// Central-difference gradient magnitude of a luma map.
fn gradient_magnitude(luma: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let gx = (luma[y * w + xp] - luma[y * w + xm]) * 0.5;
            let gy = (luma[yp * w + x] - luma[ym * w + x]) * 0.5;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Perceptual proxy: mean absolute difference of gradient-magnitude maps
/// over three octaves, averaged. Zero for identical images; insensitive to
/// global brightness shifts. Not comparable to learned perceptual metrics.
pub fn perceptual_proxy(a: &Image, b: &Image) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch("proxy inputs must match".into()));
    }
    let mut la = a.to_luma();
    let mut lb = b.to_luma();
    let mut total = 0.0f64;
    let octaves = 3;
    for _ in 0..octaves {
        let (w, h) = (la.width(), la.height());
        let ga = gradient_magnitude(&luma_f64(&la), w, h);
        let gb = gradient_magnitude(&luma_f64(&lb), w, h);
        let mad = ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / ga.len() as f64;
        total += mad;
        if w >= 2 && h >= 2 {
            la = resample_area(&la, w / 2, h / 2)?;
            lb = resample_area(&lb, w / 2, h / 2)?;
        }
    }
    Ok(total / octaves as f64)
}

/// Composites the prediction over the ground-truth background with the
/// foreground mask and returns the metric inputs `(pred', gt)`. Scoring
/// always consumes the composited prediction.
pub fn composite_then_score(
    pred: &Image,
    gt: &Image,
    gt_background: &Image,
    mask: &Image,
) -> Result<(Image, Image)> {
    if !pred.same_shape(gt) || !pred.same_shape(gt_background) {
        return Err(Error::DimensionMismatch(
            "composite inputs must share shape".into(),
        ));
    }
    if mask.channels() != 1 || mask.width() != pred.width() || mask.height() != pred.height() {
        return Err(Error::DimensionMismatch(
            "mask must be 1-channel at prediction resolution".into(),
        ));
    }
    let ch = pred.channels();
    let mut data = Vec::with_capacity(pred.data().len());
    for i in 0..pred.data().len() {
        let m = mask.data()[i / ch];
        data.push(m * pred.data()[i] + (1.0 - m) * gt_background.data()[i]);
    }
    Ok((
        Image::new(pred.width(), pred.height(), ch, data)?,
        gt.clone(),
    ))
}

/// Mean and population standard deviation of per-shadow scores for one
/// subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub mean: f64,
    pub std: f64,
}

/// Population statistics over at least two scores.
pub fn consistency_report(scores: &[f64]) -> Result<ConsistencyReport> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(ConsistencyReport {
        mean,
        std: var.sqrt(),
    })
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub proxy: f64,
}

/// Per-metric mean and population standard deviation.
#[derive(Debug, Clone, Serialize)]
pub struct EvalAggregate {
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_proxy: f64,
    pub std_proxy: f64,
}

/// Full evaluation report: per-sample rows plus aggregates and provenance.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub manifest_hash: String,
    pub resolution: usize,
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        manifest_hash: impl Into<String>,
        resolution: usize,
        rows: Vec<EvalRow>,
    ) -> Self {
        let stat = |f: &dyn Fn(&EvalRow) -> f64| -> (f64, f64) {
            if rows.is_empty() {
                return (0.0, 0.0);
            }
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (mean_ssim, std_ssim) = stat(&|r| r.ssim);
        let (mean_psnr, std_psnr) = stat(&|r| r.psnr);
        let (mean_proxy, std_proxy) = stat(&|r| r.proxy);
        Self {
            method: method.into(),
            manifest_hash: manifest_hash.into(),
            resolution,
            rows,
            aggregate: EvalAggregate {
                mean_ssim,
                std_ssim,
                mean_psnr,
                std_psnr,
                mean_proxy,
                std_proxy,
            },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,ssim,psnr,proxy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.id, r.ssim, r.psnr, r.proxy));
        }
        s
    }
}
