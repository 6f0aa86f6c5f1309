//! Pixel-space conditional DDPM: noise schedule, forward process, tiny-UNet
//! noise predictor with exact hand-derived gradients, two-stage compositional
//! training, and deterministic DDIM sampling.

pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{UNet, UNetConfig};
pub use sample::{sample, SampleOpts};
pub use schedule::{
    forward_sample, make_schedule, sample_noise_like, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_T,
};
pub use train::{train_stage, Stage, TrainConfig, TrainItem, TrainOutput};

use crate::envmap::LightingMap;
use crate::error::{Error, Result};
use crate::image::{resample_area, Image};
use crate::nn::Tensor3;

/// Trainable denoiser weights together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: UNetConfig,
    pub weights: Vec<f32>,
}

impl DenoiserParams {
    pub fn fresh(config: UNetConfig, seed: u64) -> Self {
        let net = UNet::new(config.clone());
        let weights = net.init_params::<f32>(seed);
        Self { config, weights }
    }
}

/// Conditioning for one denoiser evaluation: the noisy image plus the
/// spatially aligned condition channels and the global lighting map.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// x_t in model space (roughly [-1, 1] plus noise).
    pub noisy: Image,
    /// LDR condition image in [0, 1]; scaled to [-1, 1] internally.
    pub condition: Image,
    /// Foreground mask in [0, 1], one channel.
    pub mask: Image,
    /// Global lighting condition.
    pub lighting: LightingMap,
}

impl Conditioning {
    /// Stacks the local conditioning channels into a model input tensor.
    pub fn to_local_tensor(&self, cfg: &UNetConfig) -> Result<Tensor3<f32>> {
        let got = self.noisy.channels() + self.condition.channels() + self.mask.channels();
        if got != cfg.in_ch {
            return Err(Error::ChannelMismatch {
                expected: cfg.in_ch,
                got,
            });
        }
        if !self.noisy.same_shape(&self.condition)
            || self.mask.width() != self.noisy.width()
            || self.mask.height() != self.noisy.height()
        {
            return Err(Error::DimensionMismatch(
                "conditioning images must share the model resolution".into(),
            ));
        }
        let (w, h) = (self.noisy.width(), self.noisy.height());
        let mut data = Vec::with_capacity(cfg.in_ch * w * h);
        for c in 0..self.noisy.channels() {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.noisy.get(x, y, c));
                }
            }
        }
        for c in 0..self.condition.channels() {
            for y in 0..h {
                for x in 0..w {
                    data.push(2.0 * self.condition.get(x, y, c) - 1.0);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                data.push(self.mask.get(x, y, 0));
            }
        }
        Ok(Tensor3::from_data(cfg.in_ch, h, w, data))
    }

    /// Flattens the lighting map (resampled to the model's lighting input
    /// size) into a centered vector.
    pub fn to_light_vec(&self, cfg: &UNetConfig) -> Result<Vec<f32>> {
        let img = if self.lighting.image().width() == cfg.light_size {
            self.lighting.image().clone()
        } else {
            resample_area(self.lighting.image(), cfg.light_size, cfg.light_size)?
        };
        Ok(img.data().iter().map(|&v| 2.0 * v - 1.0).collect())
    }
}

/// Deterministic forward pass of the noise predictor.
pub fn denoise_predict(params: &DenoiserParams, cond: &Conditioning, t: usize) -> Result<Image> {
    let net = UNet::new(params.config.clone());
    let local = cond.to_local_tensor(&params.config)?;
    let light = cond.to_light_vec(&params.config)?;
    let cache = net.forward(&params.weights, &local, &light, t);
    tensor_to_image(&cache.out)
}

/// Converts a (3, H, W) tensor to a channel-interleaved image.
pub(crate) fn tensor_to_image(t: &Tensor3<f32>) -> Result<Image> {
    let (ch, h, w) = (t.ch, t.h, t.w);
    let mut data = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        let plane = t.plane(c);
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * ch + c] = plane[y * w + x];
            }
        }
    }
    Image::new(w, h, ch, data)
}

/// Converts a channel-interleaved image to a planar tensor, with an optional
/// affine remap of the values.
pub(crate) fn image_to_tensor(img: &Image, scale: f32, offset: f32) -> Tensor3<f32> {
    let (ch, h, w) = (img.channels(), img.height(), img.width());
    let mut data = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = scale * img.get(x, y, c) + offset;
            }
        }
    }
    Tensor3::from_data(ch, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_conditioning(res: usize, seed: u64) -> Conditioning {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |ch: usize, rng: &mut ChaCha8Rng| {
            Image::new(res, res, ch, (0..res * res * ch).map(|_| rng.gen()).collect()).unwrap()
        };
        let noisy = Image::new(
            res,
            res,
            3,
            (0..res * res * 3).map(|_| randn(&mut rng) as f32).collect(),
        )
        .unwrap();
        let condition = mk(3, &mut rng);
        let mask = mk(1, &mut rng);
        let lighting = crate::envmap::lighting_map(&mk(3, &mut rng)).unwrap();
        Conditioning {
            noisy,
            condition,
            mask,
            lighting,
        }
    }

    #[test]
    fn standard_model_parameter_count_is_about_1p5m() {
        let net = UNet::new(UNetConfig::standard());
        let n = net.n_params();
        assert!(
            (1_200_000..=1_600_000).contains(&n),
            "unexpected parameter count {n}"
        );
    }

    #[test]
    fn tiny_model_is_under_5k_params() {
        let net = UNet::new(UNetConfig::tiny());
        assert!(net.n_params() <= 5000, "{}", net.n_params());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = UNetConfig::tiny();
        let params = DenoiserParams {
            weights: vec![0.0; UNet::new(cfg.clone()).n_params()],
            config: cfg,
        };
        let cond = test_conditioning(8, 1);
        let out = denoise_predict(&params, &cond, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = DenoiserParams::fresh(UNetConfig::tiny(), 7);
        let cond = test_conditioning(8, 2);
        let a = denoise_predict(&params, &cond, 11).unwrap();
        let b = denoise_predict(&params, &cond, 11).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn doubling_one_final_bias_shifts_one_channel_by_a_constant() {
        let mut params = DenoiserParams::fresh(UNetConfig::tiny(), 9);
        let cond = test_conditioning(8, 3);
        let before = denoise_predict(&params, &cond, 5).unwrap();

        // The layout ends with the final conv bias, one entry per channel.
        let n = params.weights.len();
        let bias_idx = n - 3 + 1; // channel 1
        let shift = params.weights[bias_idx];
        params.weights[bias_idx] *= 2.0;
        let after = denoise_predict(&params, &cond, 5).unwrap();

        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let delta = after.get(x, y, c) - before.get(x, y, c);
                    if c == 1 {
                        assert!((delta - shift).abs() <= 1e-6);
                    } else {
                        assert_eq!(delta, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let params = DenoiserParams::fresh(UNetConfig::tiny(), 1);
        let mut cond = test_conditioning(8, 4);
        cond.condition = cond.condition.to_luma(); // 3+1+1 != 7
        assert!(matches!(
            denoise_predict(&params, &cond, 0),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn output_responds_to_local_condition_changes() {
        let params = DenoiserParams::fresh(UNetConfig::tiny(), 21);
        let cond = test_conditioning(8, 5);
        let base = denoise_predict(&params, &cond, 4).unwrap();
        let mut moved = cond.clone();
        let i = moved.condition.idx(3, 3, 0);
        moved.condition.data_mut()[i] += 0.25;
        let out = denoise_predict(&params, &moved, 4).unwrap();
        let delta: f32 = base
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0, "denoiser ignores its local condition");
    }

    #[test]
    fn output_responds_to_lighting_changes() {
        let params = DenoiserParams::fresh(UNetConfig::tiny(), 22);
        let cond = test_conditioning(8, 6);
        let base = denoise_predict(&params, &cond, 4).unwrap();
        let mut moved = cond.clone();
        let brighter = moved.lighting.image().map(|v| (v + 0.3).min(1.0));
        moved.lighting = crate::envmap::LightingMap::new(brighter).unwrap();
        let out = denoise_predict(&params, &moved, 4).unwrap();
        let delta: f32 = base
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0, "denoiser ignores its global condition");
    }

    #[test]
    fn tensor_image_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::new(6, 4, 3, (0..72).map(|_| rng.gen()).collect()).unwrap();
        let t = image_to_tensor(&img, 1.0, 0.0);
        let back = tensor_to_image(&t).unwrap();
        assert_eq!(img.data(), back.data());
    }
}
