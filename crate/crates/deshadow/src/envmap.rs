//! Equirectangular HDR environment maps: solid-angle-correct integration,
//! energy-preserving angular diffusion, background projection, tonemapping,
//! and 32x32 lighting-map extraction.
//!
//! Pixel `(u, v)` maps to longitude `phi = 2*pi*(u+0.5)/W - pi` and latitude
//! `theta = pi*(v+0.5)/H - pi/2`; direction is
//! `(cos(theta)sin(phi), sin(theta), cos(theta)cos(phi))` with +y up.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{resample_area, Image};
use crate::io::{read_image, write_image, ImageFormat};

/// Equirectangular HDR radiance map (3 channels, width == 2 * height).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    image: Image,
}

impl EnvMap {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidImage(
                "environment map must have 3 channels".into(),
            ));
        }
        if image.width() != 2 * image.height() {
            return Err(Error::InvalidImage(format!(
                "environment map must be 2:1 equirectangular, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if image.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidImage(
                "environment radiance must be non-negative".into(),
            ));
        }
        Ok(Self { image })
    }

    pub fn splat(height: usize, value: f32) -> Self {
        Self::new(Image::splat(2 * height, height, 3, value)).expect("constant env is valid")
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Bilinear radiance lookup for a world direction, wrapping in longitude
    /// and clamping in latitude.
    pub fn sample_dir(&self, dir: [f32; 3]) -> [f32; 3] {
        let (w, h) = (self.width(), self.height());
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let (x, y, z) = (dir[0] / norm, dir[1] / norm, dir[2] / norm);
        let phi = x.atan2(z);
        let theta = y.clamp(-1.0, 1.0).asin();
        let uc = (phi as f64 + PI) / (2.0 * PI) * w as f64 - 0.5;
        let vc = (theta as f64 + PI / 2.0) / PI * h as f64 - 0.5;

        let u0 = uc.floor();
        let fu = (uc - u0) as f32;
        let u0 = u0 as i64;
        let u1 = u0 + 1;
        let wrap = |u: i64| -> usize { u.rem_euclid(w as i64) as usize };
        let v0f = vc.floor();
        let fv = (vc - v0f) as f32;
        let v0 = (v0f as i64).clamp(0, h as i64 - 1) as usize;
        let v1 = (v0f as i64 + 1).clamp(0, h as i64 - 1) as usize;

        let mut out = [0.0f32; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let a = self.image.get(wrap(u0), v0, c);
            let b = self.image.get(wrap(u1), v0, c);
            let d = self.image.get(wrap(u0), v1, c);
            let e = self.image.get(wrap(u1), v1, c);
            let top = a + (b - a) * fu;
            let bot = d + (e - d) * fu;
            *slot = top + (bot - top) * fv;
        }
        out
    }

    /// Total energy: sum of radiance times per-texel solid angle over all
    /// texels and channels.
    pub fn total_energy(&self) -> f64 {
        let h = self.height();
        let w = self.width();
        let weights = solid_angle_weights(h);
        let mut e = 0.0f64;
        for v in 0..h {
            for u in 0..w {
                let dom = weights.get(u, v, 0) as f64;
                for c in 0..3 {
                    e += self.image.get(u, v, c) as f64 * dom;
                }
            }
        }
        e
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_image(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_image(path, &self.image, ImageFormat::Pfm)
    }
}

/// Tonemapped 32x32 LDR image used as the global lighting condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingMap {
    image: Image,
}

pub const LIGHTING_MAP_SIZE: usize = 32;

impl LightingMap {
    pub fn new(image: Image) -> Result<Self> {
        if image.width() != LIGHTING_MAP_SIZE
            || image.height() != LIGHTING_MAP_SIZE
            || image.channels() != 3
        {
            return Err(Error::InvalidImage(format!(
                "lighting map must be {LIGHTING_MAP_SIZE}x{LIGHTING_MAP_SIZE}x3, got {}x{}x{}",
                image.width(),
                image.height(),
                image.channels()
            )));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidImage(
                "lighting map values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }
}

/// Per-texel solid angles for an `h x 2h` equirectangular grid, as a
/// 1-channel image. Each weight is the analytic integral of `cos(latitude)`
/// over its latitude band times the longitude step, so the total is `4*pi`.
pub fn solid_angle_weights(h: usize) -> Image {
    assert!(h >= 1, "grid height must be at least 1");
    let w = 2 * h;
    let dphi = 2.0 * PI / w as f64;
    let half_band = PI / (2.0 * h as f64);
    let mut data = Vec::with_capacity(w * h);
    for v in 0..h {
        let lat = PI * (v as f64 + 0.5) / h as f64 - PI / 2.0;
        let band = 2.0 * half_band.sin() * lat.cos();
        let wv = (dphi * band) as f32;
        data.extend(std::iter::repeat(wv).take(w));
    }
    Image::new(w, h, 1, data).expect("weight grid is valid")
}

/// Reinhard compression followed by gamma 1/2.2: `(x/(1+x))^(1/2.2)`.
/// Monotone, maps `[0, inf)` into `[0, 1)`.
pub fn tonemap(x: f32) -> f32 {
    let x = x.max(0.0);
    (x / (1.0 + x)).powf(1.0 / 2.2)
}

/// Applies [`tonemap`] per sample.
pub fn tonemap_image(img: &Image) -> Image {
    img.map(tonemap)
}

/// Energy-preserving spherical diffusion of an environment map.
///
/// Radiance is averaged over directions with Gaussian weight
/// `exp(-angle^2 / (2 sigma^2))` in great-circle distance. The discrete
/// kernel is equilibrated over latitudes so that it both preserves constants
/// and conserves energy, then the result is globally rescaled so total energy
/// matches the input exactly.
pub fn diffuse_blur(env: &EnvMap, angular_sigma: f32) -> Result<EnvMap> {
    if !(angular_sigma > 0.0 && angular_sigma <= PI as f32 / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "angular_sigma must lie in (0, pi/2], got {angular_sigma}"
        )));
    }
    let op = blur_operator(env.height(), angular_sigma);
    let (w, h) = (env.width(), env.height());

    let mut out = vec![0.0f32; w * h * 3];
    out.par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(vo, row_out)| {
            for uo in 0..w {
                let mut acc = [0.0f64; 3];
                for vi in 0..h {
                    let krow = &op.kernel[(vo * h + vi) * w..(vo * h + vi + 1) * w];
                    let scale = op.in_scale[vi];
                    for ui in 0..w {
                        let k = krow[(ui + w - uo) % w] * scale;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += k * env.image.get(ui, vi, c) as f64;
                        }
                    }
                }
                for c in 0..3 {
                    row_out[uo * 3 + c] = (acc[c] * op.out_scale[vo]) as f32;
                }
            }
        });

    let blurred = EnvMap::new(Image::new(w, h, 3, out)?)?;
    // Pin total energy to the input exactly.
    let e_in = env.total_energy();
    let e_out = blurred.total_energy();
    if e_in == 0.0 || e_out == 0.0 {
        return Ok(blurred);
    }
    let rescale = (e_in / e_out) as f32;
    let pinned = blurred.image.map(|v| (v * rescale).max(0.0));
    EnvMap::new(pinned)
}

struct BlurOperator {
    /// Gaussian great-circle weights, indexed `[vo*h + vi][du]`.
    kernel: Vec<f64>,
    /// Per-input-row scaling (Sinkhorn column factor times solid angle).
    in_scale: Vec<f64>,
    /// Per-output-row scaling (Sinkhorn row factor, then exact row sum fixup).
    out_scale: Vec<f64>,
}

static BLUR_OPS: Lazy<Mutex<HashMap<(usize, u32), Arc<BlurOperator>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn blur_operator(h: usize, sigma: f32) -> Arc<BlurOperator> {
    let key = (h, sigma.to_bits());
    if let Some(op) = BLUR_OPS.lock().unwrap().get(&key) {
        return op.clone();
    }
    let op = Arc::new(build_blur_operator(h, sigma as f64));
    BLUR_OPS.lock().unwrap().insert(key, op.clone());
    op
}

fn build_blur_operator(h: usize, sigma: f64) -> BlurOperator {
    let w = 2 * h;
    let lat: Vec<f64> = (0..h)
        .map(|v| PI * (v as f64 + 0.5) / h as f64 - PI / 2.0)
        .collect();
    let dom: Vec<f64> = {
        let weights = solid_angle_weights(h);
        (0..h).map(|v| weights.get(0, v, 0) as f64).collect()
    };

    // Great-circle Gaussian between rows vo and vi at longitude offset du.
    let mut kernel = vec![0.0f64; h * h * w];
    for vo in 0..h {
        for vi in 0..h {
            let (so, co) = (lat[vo].sin(), lat[vo].cos());
            let (si, ci) = (lat[vi].sin(), lat[vi].cos());
            let row = &mut kernel[(vo * h + vi) * w..(vo * h + vi + 1) * w];
            for (du, slot) in row.iter_mut().enumerate() {
                let dphi = 2.0 * PI * du as f64 / w as f64;
                let cosang = (so * si + co * ci * dphi.cos()).clamp(-1.0, 1.0);
                let ang = cosang.acos();
                *slot = (-ang * ang / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    // Condensed row-to-row mass: total kernel weight between one output texel
    // at row vo and every input texel in row vi.
    let mut condensed = vec![0.0f64; h * h];
    for vo in 0..h {
        for vi in 0..h {
            condensed[vo * h + vi] = kernel[(vo * h + vi) * w..(vo * h + vi + 1) * w]
                .iter()
                .sum();
        }
    }

    // Sinkhorn equilibration: find per-row factors r, c such that
    //   r[vo] * sum_vi condensed[vo][vi] * dom[vi] * c[vi] = 1   (constants)
    //   c[vi] * sum_vo condensed[vo][vi] * dom[vo] * r[vo] = 1   (energy)
    let mut r = vec![1.0f64; h];
    let mut c = vec![1.0f64; h];
    for _ in 0..1000 {
        for vo in 0..h {
            let s: f64 = (0..h).map(|vi| condensed[vo * h + vi] * dom[vi] * c[vi]).sum();
            r[vo] = 1.0 / s;
        }
        for vi in 0..h {
            let s: f64 = (0..h).map(|vo| condensed[vo * h + vi] * dom[vo] * r[vo]).sum();
            c[vi] = 1.0 / s;
        }
        let worst = (0..h)
            .map(|vo| {
                let s: f64 = (0..h).map(|vi| condensed[vo * h + vi] * dom[vi] * c[vi]).sum();
                (r[vo] * s - 1.0).abs()
            })
            .fold(0.0f64, f64::max);
        if worst < 1e-14 {
            break;
        }
    }
    // Exact row-sum fixup so constants are preserved to rounding.
    let mut out_scale = vec![0.0f64; h];
    for vo in 0..h {
        let s: f64 = (0..h).map(|vi| condensed[vo * h + vi] * dom[vi] * c[vi]).sum();
        out_scale[vo] = r[vo] / (r[vo] * s);
    }
    let in_scale: Vec<f64> = (0..h).map(|vi| dom[vi] * c[vi]).collect();

    BlurOperator {
        kernel,
        in_scale,
        out_scale,
    }
}

/// Pinhole projection of an environment map in linear radiance (no tonemap).
/// `yaw` rotates about +y, `pitch` about the camera x axis; `fov` is the
/// vertical field of view.
pub fn project_radiance(
    env: &EnvMap,
    view_yaw: f32,
    view_pitch: f32,
    fov: f32,
    out_w: usize,
    out_h: usize,
) -> Result<Image> {
    if !(fov > 0.0 && (fov as f64) < PI) {
        return Err(Error::InvalidArgument(format!(
            "fov must lie in (0, pi), got {fov}"
        )));
    }
    let half = (fov * 0.5).tan();
    let aspect = out_w as f32 / out_h as f32;
    let (sy, cy) = (view_yaw.sin(), view_yaw.cos());
    let (sp, cp) = (view_pitch.sin(), view_pitch.cos());
    let mut data = vec![0.0f32; out_w * out_h * 3];
    for y in 0..out_h {
        for x in 0..out_w {
            let px = (2.0 * (x as f32 + 0.5) / out_w as f32 - 1.0) * half * aspect;
            let py = (1.0 - 2.0 * (y as f32 + 0.5) / out_h as f32) * half;
            // Camera ray (x right, y up, z forward), pitched then yawed.
            let (dx, dy, dz) = (px, py, 1.0f32);
            let (dy, dz) = (cp * dy - sp * dz, sp * dy + cp * dz);
            let (dx, dz) = (cy * dx + sy * dz, -sy * dx + cy * dz);
            let rgb = env.sample_dir([dx, dy, dz]);
            let i = (y * out_w + x) * 3;
            data[i..i + 3].copy_from_slice(&rgb);
        }
    }
    Image::new(out_w, out_h, 3, data)
}

/// Tonemapped LDR background: [`project_radiance`] followed by [`tonemap`].
pub fn project_background(
    env: &EnvMap,
    view_yaw: f32,
    view_pitch: f32,
    fov: f32,
    out_w: usize,
    out_h: usize,
) -> Result<Image> {
    Ok(tonemap_image(&project_radiance(
        env, view_yaw, view_pitch, fov, out_w, out_h,
    )?))
}

/// Area-downsamples an LDR image to the 32x32 global lighting condition.
pub fn lighting_map(img: &Image) -> Result<LightingMap> {
    let small = resample_area(&img.to_rgb(), LIGHTING_MAP_SIZE, LIGHTING_MAP_SIZE)?;
    LightingMap::new(small.clamp01())
}
