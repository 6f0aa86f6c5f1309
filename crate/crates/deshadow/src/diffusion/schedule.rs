//! Fixed variance schedule for the forward noising process.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::randn;
use rand_chacha::ChaCha8Rng;

/// Diffusion schedule constants: per-step beta, alpha = 1 - beta, and the
/// cumulative signal retention alpha_bar.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Builds a linear beta schedule with `alpha_bar[t]` as the running product
/// of `(1 - beta)`.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::InvalidSchedule("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = if t_count == 1 {
        vec![beta_start]
    } else {
        (0..t_count)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_count - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Forward process sample `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `x0` is expected in model space `[-1, 1]`; `eps` is i.i.d. standard normal
/// with the same shape.
pub fn forward_sample(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    if t >= sched.len() {
        return Err(Error::InvalidSchedule(format!(
            "step {t} out of range 0..{}",
            sched.len()
        )));
    }
    let ab = sched.alpha_bar[t];
    let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip(eps, |x, e| sa * x + sn * e)
}

/// Fills an image-shaped noise field with standard normal draws.
pub fn sample_noise_like(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let data: Vec<f32> = (0..img.data().len()).map(|_| randn(rng) as f32).collect();
    Image::new(img.width(), img.height(), img.channels(), data)
        .expect("normal draws are finite")
}
