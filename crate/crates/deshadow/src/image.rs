//! Float image container and the resampling/filtering/frequency ops built on it.
//!
//! Pixels are stored row-major and channel-interleaved, in linear (non-gamma)
//! radiometric values. LDR images live in `[0, 1]`, HDR images in `[0, inf)`.

use crate::error::{Error, Result};

/// Row-major, channel-interleaved float image. 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from raw data, validating shape and finiteness.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels} (must be 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
            .expect("zeros is always valid")
    }

    /// Constant-valued image.
    pub fn splat(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("splat of a finite value is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Applies `f` to every sample, preserving shape.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rec.601 luma for 3-channel images; identity copy for 1-channel.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            out.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: out,
        }
    }

    /// Expands a 1-channel image to 3 channels by replication; 3-channel input
    /// is returned unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Bilinear sample at a continuous pixel-center coordinate, clamped to the
    /// image bounds. `(0.0, 0.0)` is the center of the top-left pixel.
    pub fn sample_bilinear(&self, x: f32, y: f32, c: usize) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        top + (bot - top) * fy
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64) * (i as f64) / s2).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    // Renormalize after truncating at radius ceil(3*sigma).
    for v in &mut k {
        *v /= sum;
    }
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
///
/// The kernel is truncated at radius `ceil(3*sigma)` and renormalized to sum
/// to one, so constant images are invariant. `sigma == 0` returns a copy.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h, ch) = (img.width, img.height, img.channels);

    // Horizontal pass.
    let mut tmp = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * img.get(sx, y, c);
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    Image::new(w, h, ch, out)
}

/// Box/area resampling: each output pixel is the area-weighted mean of the
/// input pixels it covers. Exact block averaging for integer scale factors.
pub fn resample_area(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(
            "resample target must be at least 1x1".into(),
        ));
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;

    // Per-axis coverage weights, computed once.
    let spans_x = axis_spans(w, out_w, sx);
    let spans_y = axis_spans(h, out_h, sy);

    let mut out = vec![0.0f32; out_w * out_h * ch];
    for (oy, span_y) in spans_y.iter().enumerate() {
        for (ox, span_x) in spans_x.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for &(iy, wy) in span_y {
                    for &(ix, wx) in span_x {
                        acc += (wx * wy) * img.get(ix, iy, c) as f64;
                        wsum += wx * wy;
                    }
                }
                out[(oy * out_w + ox) * ch + c] = (acc / wsum) as f32;
            }
        }
    }
    Image::new(out_w, out_h, ch, out)
}

/// For each output index along one axis, the covered input indices with their
/// fractional overlap lengths.
fn axis_spans(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = ((o + 1) as f64 * scale).min(in_len as f64);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_len).saturating_sub(1);
            (first..=last)
                .filter_map(|i| {
                    let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    (cover > 0.0).then_some((i, cover))
                })
                .collect()
        })
        .collect()
}

/// Bilinear resize to an arbitrary target size.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be at least 1x1".into(),
        ));
    }
    let ch = img.channels();
    let sx = img.width() as f32 / out_w as f32;
    let sy = img.height() as f32 / out_h as f32;
    let mut data = vec![0.0f32; out_w * out_h * ch];
    for y in 0..out_h {
        for x in 0..out_w {
            let ix = (x as f32 + 0.5) * sx - 0.5;
            let iy = (y as f32 + 0.5) * sy - 0.5;
            for c in 0..ch {
                data[(y * out_w + x) * ch + c] = img.sample_bilinear(ix, iy, c);
            }
        }
    }
    Image::new(out_w, out_h, ch, data)
}

/// Splits an image into `(low, high)` bands with `low = gaussian_blur(img, sigma)`
/// and `high = img - low`, so `low + high` reconstructs the input.
pub fn split_frequency(img: &Image, sigma: f32) -> Result<(Image, Image)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split_frequency sigma must be > 0, got {sigma}"
        )));
    }
    let low = gaussian_blur(img, sigma)?;
    let high = img.zip(&low, |a, b| a - b)?;
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_image(w: usize, h: usize, ch: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * ch).map(|_| rng.gen::<f32>()).collect();
        Image::new(w, h, ch, data).unwrap()
    }

    /// Dense 2-D convolution oracle with clamp-to-edge borders, using the
    /// outer product of the same truncated 1-D kernels.
    fn blur_oracle(img: &Image, sigma: f32) -> Image {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let (w, h, ch) = (img.width(), img.height(), img.channels());
        let mut out = Image::zeros(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f64;
                    for (kyi, &ky) in k.iter().enumerate() {
                        for (kxi, &kx) in k.iter().enumerate() {
                            let sy = (y as i64 + kyi as i64 - r).clamp(0, h as i64 - 1) as usize;
                            let sx = (x as i64 + kxi as i64 - r).clamp(0, w as i64 - 1) as usize;
                            acc += (ky as f64) * (kx as f64) * img.get(sx, sy, c) as f64;
                        }
                    }
                    out.set(x, y, c, acc as f32);
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()))
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn blur_sigma_zero_is_bitwise_copy() {
        let img = random_image(9, 7, 3, 1);
        let out = gaussian_blur(&img, 0.0).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn blur_rejects_non_finite_sigma() {
        let img = Image::zeros(4, 4, 1);
        assert!(gaussian_blur(&img, f32::NAN).is_err());
        assert!(gaussian_blur(&img, f32::INFINITY).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_constant_invariance() {
        let img = Image::splat(20, 20, 3, 0.5);
        let out = gaussian_blur(&img, 4.0).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() <= 1e-6, "got {v}");
        }
    }

    #[test]
    fn blur_matches_dense_2d_oracle_on_impulse() {
        let mut img = Image::zeros(15, 15, 1);
        img.set(7, 7, 0, 1.0);
        let fast = gaussian_blur(&img, 1.5).unwrap();
        let slow = blur_oracle(&img, 1.5);
        assert!(max_abs_diff(&fast, &slow) <= 1e-6);
    }

    #[test]
    fn blur_matches_dense_2d_oracle_on_random_images() {
        for seed in 0..10 {
            let img = random_image(15, 15, 1, seed);
            let fast = gaussian_blur(&img, 1.5).unwrap();
            let slow = blur_oracle(&img, 1.5);
            assert!(
                max_abs_diff(&fast, &slow) <= 1e-6,
                "seed {seed}: {}",
                max_abs_diff(&fast, &slow)
            );
        }
    }

    #[test]
    fn blur_is_linear() {
        let x = random_image(16, 12, 3, 2);
        let y = random_image(16, 12, 3, 3);
        let (a, b) = (0.7f32, -0.3f32);
        let combo = x.zip(&y, |xv, yv| a * xv + b * yv).unwrap();
        let lhs = gaussian_blur(&combo, 2.0).unwrap();
        let bx = gaussian_blur(&x, 2.0).unwrap();
        let by = gaussian_blur(&y, 2.0).unwrap();
        let rhs = bx.zip(&by, |xv, yv| a * xv + b * yv).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0));
        }
    }

    #[test]
    fn blur_preserves_mean_of_constant_padded_image() {
        // With a constant band of width ceil(3*sigma) around a free interior,
        // every interior pixel keeps full kernel mass, so the global mean is
        // preserved up to rounding. Image is > 6*sigma per dimension.
        let sigma = 2.0f32;
        let r = (3.0 * sigma).ceil() as usize;
        let mut img = Image::splat(40, 40, 1, 0.5);
        let noise = random_image(40, 40, 1, 4);
        for y in r..40 - r {
            for x in r..40 - r {
                img.set(x, y, 0, noise.get(x, y, 0));
            }
        }
        let out = gaussian_blur(&img, sigma).unwrap();
        assert!((img.mean() - out.mean()).abs() / img.mean().abs() <= 1e-4);
    }

    #[test]
    fn resample_constant_invariance() {
        let img = Image::splat(12, 8, 3, 0.25);
        let out = resample_area(&img, 5, 3).unwrap();
        for &v in out.data() {
            assert!((v - 0.25).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_block_mean_identity() {
        // 4x4 image with 2x2 uniform blocks of values 0,1,2,3.
        let mut img = Image::zeros(4, 4, 1);
        for y in 0..4 {
            for x in 0..4 {
                let block = (y / 2) * 2 + (x / 2);
                img.set(x, y, 0, block as f32);
            }
        }
        let out = resample_area(&img, 2, 2).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn resample_matches_mean_of_four_oracle() {
        let img = random_image(64, 64, 3, 5);
        let out = resample_area(&img, 32, 32).unwrap();
        for oy in 0..32 {
            for ox in 0..32 {
                for c in 0..3 {
                    let mean = (img.get(2 * ox, 2 * oy, c)
                        + img.get(2 * ox + 1, 2 * oy, c)
                        + img.get(2 * ox, 2 * oy + 1, c)
                        + img.get(2 * ox + 1, 2 * oy + 1, c))
                        / 4.0;
                    assert!((out.get(ox, oy, c) - mean).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn resample_preserves_global_mean_for_integer_factors() {
        let img = random_image(48, 36, 1, 6);
        let out = resample_area(&img, 16, 12).unwrap();
        assert!((img.mean() - out.mean()).abs() <= 1e-6);
    }

    #[test]
    fn split_frequency_reconstructs() {
        let img = random_image(24, 18, 3, 7);
        let (low, high) = split_frequency(&img, 2.5).unwrap();
        for i in 0..img.data().len() {
            let rec = low.data()[i] + high.data()[i];
            assert!((rec - img.data()[i]).abs() <= 1e-7);
        }
    }

    #[test]
    fn split_frequency_constant_has_zero_high() {
        let img = Image::splat(16, 16, 1, 0.8);
        let (_, high) = split_frequency(&img, 3.0).unwrap();
        assert!(high.max_abs() <= 1e-6);
    }

    #[test]
    fn split_frequency_high_energy_grows_with_sigma() {
        // Checkerboard of period 2.
        let mut img = Image::zeros(32, 32, 1);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, 0, ((x + y) % 2) as f32);
            }
        }
        let (_, high_wide) = split_frequency(&img, 2.0).unwrap();
        let (_, high_narrow) = split_frequency(&img, 0.5).unwrap();
        let energy = |im: &Image| im.data().iter().map(|v| v.abs() as f64).sum::<f64>();
        assert!(energy(&high_wide) > energy(&high_narrow));
    }
}
