//! OLAT (One-Light-at-A-Time) relighting: weighted sums of a per-light image
//! stack under an environment map, plus the harmonization and deshadow pair
//! constructions built on top.

use std::f32::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envmap::{diffuse_blur, project_background, tonemap_image, EnvMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_image, write_image, ImageFormat};

/// One light of the rig: a unit direction and the solid angle it covers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Light {
    pub direction: [f32; 3],
    pub solid_angle: f32,
}

/// Camera orientation for background projection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct View {
    pub yaw: f32,
    pub pitch: f32,
    pub fov: f32,
}

impl Default for View {
    fn default() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            fov: 0.9,
        }
    }
}

/// Per-light image stack with its light rig and foreground alpha.
#[derive(Debug, Clone)]
pub struct OLATSet {
    pub lights: Vec<Light>,
    pub images: Vec<Image>,
    pub alpha: Image,
}

impl OLATSet {
    pub fn new(lights: Vec<Light>, images: Vec<Image>, alpha: Image) -> Result<Self> {
        if lights.len() != images.len() || lights.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "light/image count mismatch: {} vs {}",
                lights.len(),
                images.len()
            )));
        }
        for (i, l) in lights.iter().enumerate() {
            let n = (l.direction[0].powi(2) + l.direction[1].powi(2) + l.direction[2].powi(2))
                .sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "light {i} direction has norm {n}, expected 1"
                )));
            }
            if !(l.solid_angle > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "light {i} solid angle must be positive"
                )));
            }
        }
        let total: f32 = lights.iter().map(|l| l.solid_angle).sum();
        if (total - 4.0 * PI).abs() / (4.0 * PI) > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "light solid angles sum to {total}, expected 4*pi"
            )));
        }
        let first = &images[0];
        for (i, img) in images.iter().enumerate() {
            if !img.same_shape(first) {
                return Err(Error::DimensionMismatch(format!(
                    "OLAT image {i} differs in shape"
                )));
            }
        }
        if alpha.channels() != 1
            || alpha.width() != first.width()
            || alpha.height() != first.height()
        {
            return Err(Error::DimensionMismatch(
                "alpha must be a 1-channel image matching the stack".into(),
            ));
        }
        Ok(Self {
            lights,
            images,
            alpha,
        })
    }

    pub fn count(&self) -> usize {
        self.lights.len()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    /// Loads a set from a directory holding `lights.json`, `alpha.pfm`, and
    /// one `light_NNNN.pfm` per light.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let lights_path = dir.join("lights.json");
        let text =
            std::fs::read_to_string(&lights_path).map_err(|e| Error::io(&lights_path, e))?;
        let lights: Vec<Light> = serde_json::from_str(&text)?;
        let images = (0..lights.len())
            .map(|i| read_image(dir.join(format!("light_{i:04}.pfm"))))
            .collect::<Result<Vec<_>>>()?;
        let alpha = read_image(dir.join("alpha.pfm"))?;
        Self::new(lights, images, alpha)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lights_path = dir.join("lights.json");
        std::fs::write(&lights_path, serde_json::to_string_pretty(&self.lights)?)
            .map_err(|e| Error::io(&lights_path, e))?;
        for (i, img) in self.images.iter().enumerate() {
            write_image(dir.join(format!("light_{i:04}.pfm")), img, ImageFormat::Pfm)?;
        }
        write_image(dir.join("alpha.pfm"), &self.alpha, ImageFormat::Pfm)
    }
}

/// Evenly distributed unit directions on the sphere (golden-angle spiral),
/// each assigned an equal `4*pi/n` solid angle.
pub fn fibonacci_sphere(n: usize) -> Vec<Light> {
    let golden = PI * (3.0 - 5.0f32.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f32 + 0.5) / n as f32;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f32;
            let dir = [r * phi.cos(), y, r * phi.sin()];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            Light {
                direction: [dir[0] / norm, dir[1] / norm, dir[2] / norm],
                solid_angle: 4.0 * PI / n as f32,
            }
        })
        .collect()
}

/// Relights the stack under an environment map: each light contributes its
/// image scaled by the env radiance sampled at its direction times its solid
/// angle. Output is linear HDR; summation order is fixed for reproducibility.
pub fn relight(olat: &OLATSet, env: &EnvMap) -> Image {
    let (w, h) = (olat.width(), olat.height());
    let ch = olat.images[0].channels();
    let mut acc = vec![0.0f32; w * h * ch];
    for (light, img) in olat.lights.iter().zip(&olat.images) {
        let radiance = env.sample_dir(light.direction);
        let weight = [
            radiance[0] * light.solid_angle,
            radiance[1] * light.solid_angle,
            radiance[2] * light.solid_angle,
        ];
        for (i, (dst, &src)) in acc.iter_mut().zip(img.data()).enumerate() {
            *dst += weight[if ch == 3 { i % 3 } else { 0 }] * src;
        }
    }
    Image::new(w, h, ch, acc).expect("relight of finite inputs is finite")
}

/// `fg * alpha + bg * (1 - alpha)` with a 1-channel alpha.
pub fn alpha_composite(fg: &Image, bg: &Image, alpha: &Image) -> Result<Image> {
    if !fg.same_shape(bg) || alpha.width() != fg.width() || alpha.height() != fg.height() {
        return Err(Error::DimensionMismatch(
            "composite inputs must share dimensions".into(),
        ));
    }
    let ch = fg.channels();
    let mut data = Vec::with_capacity(fg.data().len());
    for i in 0..fg.data().len() {
        let a = alpha.data()[i / ch];
        data.push(fg.data()[i] * a + bg.data()[i] * (1.0 - a));
    }
    Image::new(fg.width(), fg.height(), ch, data)
}

/// One harmonization training record: a foreground lit under one environment
/// pasted onto a background from another.
#[derive(Debug, Clone)]
pub struct HarmonizationPair {
    /// Foreground lit by env A composited over env B's background.
    pub composite_input: Image,
    /// Projected, tonemapped background of env B.
    pub background: Image,
    /// Foreground lit by env B composited over env B's background.
    pub target: Image,
    /// Foreground alpha.
    pub mask: Image,
}

/// Builds a harmonization pair; rejects identical environment maps.
pub fn make_harmonization_pair(
    olat: &OLATSet,
    env_a: &EnvMap,
    env_b: &EnvMap,
    view: &View,
) -> Result<HarmonizationPair> {
    if env_a.image() == env_b.image() {
        return Err(Error::DegeneratePair(
            "harmonization pair requires two distinct environment maps".into(),
        ));
    }
    make_harmonization_pair_unchecked(olat, env_a, env_b, view)
}

fn make_harmonization_pair_unchecked(
    olat: &OLATSet,
    env_a: &EnvMap,
    env_b: &EnvMap,
    view: &View,
) -> Result<HarmonizationPair> {
    let (w, h) = (olat.width(), olat.height());
    let background = project_background(env_b, view.yaw, view.pitch, view.fov, w, h)?;
    let fg_a = tonemap_image(&relight(olat, env_a)).to_rgb();
    let fg_b = tonemap_image(&relight(olat, env_b)).to_rgb();
    let composite_input = alpha_composite(&fg_a, &background, &olat.alpha)?;
    let target = alpha_composite(&fg_b, &background, &olat.alpha)?;
    Ok(HarmonizationPair {
        composite_input,
        background,
        target,
        mask: olat.alpha.clone(),
    })
}

/// One deshadow training record: sharp-lit input and diffused-lit target over
/// a shared background.
#[derive(Debug, Clone)]
pub struct DeshadowPair {
    pub input: Image,
    pub target: Image,
    pub mask: Image,
}

/// Builds a deshadow pair: the input is relit by `env`, the target by the
/// energy-preserving diffusion of `env`; both share the background projected
/// from the sharp `env`.
pub fn make_deshadow_pair(
    olat: &OLATSet,
    env: &EnvMap,
    view: &View,
    angular_sigma: f32,
) -> Result<DeshadowPair> {
    let (w, h) = (olat.width(), olat.height());
    let background = project_background(env, view.yaw, view.pitch, view.fov, w, h)?;
    let diffused = diffuse_blur(env, angular_sigma)?;
    let fg_in = tonemap_image(&relight(olat, env)).to_rgb();
    let fg_tg = tonemap_image(&relight(olat, &diffused)).to_rgb();
    Ok(DeshadowPair {
        input: alpha_composite(&fg_in, &background, &olat.alpha)?,
        target: alpha_composite(&fg_tg, &background, &olat.alpha)?,
        mask: olat.alpha.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_env(h: usize, seed: u64) -> EnvMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * h * h * 3).map(|_| rng.gen::<f32>()).collect();
        EnvMap::new(Image::new(2 * h, h, 3, data).unwrap()).unwrap()
    }

    /// A Lambertian unit sphere filling a small image: analytic normals, no
    /// occlusion. Good enough to exercise relighting contracts.
    fn sphere_olat(res: usize, n_lights: usize) -> OLATSet {
        let lights = fibonacci_sphere(n_lights);
        let mut alpha = Image::zeros(res, res, 1);
        let mut normals = vec![None; res * res];
        for y in 0..res {
            for x in 0..res {
                let nx = 2.0 * (x as f32 + 0.5) / res as f32 - 1.0;
                let ny = 1.0 - 2.0 * (y as f32 + 0.5) / res as f32;
                let r2 = nx * nx + ny * ny;
                if r2 <= 0.9 {
                    let nz = (1.0 - r2).sqrt();
                    normals[y * res + x] = Some([nx, ny, nz]);
                    alpha.set(x, y, 0, 1.0);
                }
            }
        }
        let images = lights
            .iter()
            .map(|l| {
                let mut img = Image::zeros(res, res, 3);
                for (i, n) in normals.iter().enumerate() {
                    if let Some(n) = n {
                        let lambert = (n[0] * l.direction[0]
                            + n[1] * l.direction[1]
                            + n[2] * l.direction[2])
                            .max(0.0);
                        for c in 0..3 {
                            img.data_mut()[i * 3 + c] = lambert * (0.6 + 0.1 * c as f32);
                        }
                    }
                }
                img
            })
            .collect();
        OLATSet::new(lights, images, alpha).unwrap()
    }

    #[test]
    fn fibonacci_sphere_directions_are_unit_and_cover() {
        let lights = fibonacci_sphere(160);
        for l in &lights {
            let n = (l.direction[0].powi(2) + l.direction[1].powi(2) + l.direction[2].powi(2))
                .sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        let total: f32 = lights.iter().map(|l| l.solid_angle).sum();
        assert!((total - 4.0 * PI).abs() / (4.0 * PI) <= 1e-5);
    }

    #[test]
    fn relight_black_env_is_black() {
        let olat = sphere_olat(12, 16);
        let env = EnvMap::splat(8, 0.0);
        let out = relight(&olat, &env);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relight_constant_env_matches_direct_sum_oracle() {
        let olat = sphere_olat(12, 24);
        let c = 0.8f32;
        let env = EnvMap::splat(8, c);
        let out = relight(&olat, &env);
        // Oracle: c * sum_i solid_angle_i * L_i, accumulated in f64.
        for i in 0..out.data().len() {
            let mut expect = 0.0f64;
            for (l, img) in olat.lights.iter().zip(&olat.images) {
                expect += (c * l.solid_angle) as f64 * img.data()[i] as f64;
            }
            let got = out.data()[i] as f64;
            assert!(
                (got - expect).abs() <= 1e-5 * expect.abs().max(1e-6),
                "{got} vs {expect}"
            );
        }
    }

    #[test]
    fn relight_superposition() {
        let olat = sphere_olat(10, 20);
        for seed in 0..5 {
            let a = random_env(8, seed);
            let b = random_env(8, seed + 100);
            let sum = EnvMap::new(a.image().zip(b.image(), |x, y| x + y).unwrap()).unwrap();
            let ra = relight(&olat, &a);
            let rb = relight(&olat, &b);
            let rsum = relight(&olat, &sum);
            for i in 0..rsum.data().len() {
                let rhs = ra.data()[i] as f64 + rb.data()[i] as f64;
                let lhs = rsum.data()[i] as f64;
                assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn relight_is_non_negative_and_scales_exactly() {
        let olat = sphere_olat(10, 20);
        let env = random_env(8, 7);
        let out = relight(&olat, &env);
        assert!(out.data().iter().all(|&v| v >= 0.0));

        // Power-of-two scaling is bit-exact in IEEE arithmetic.
        let scaled_env = EnvMap::new(env.image().map(|v| 2.0 * v)).unwrap();
        let scaled = relight(&olat, &scaled_env);
        for i in 0..out.data().len() {
            assert_eq!(scaled.data()[i], 2.0 * out.data()[i]);
        }
    }

    #[test]
    fn harmonization_pair_rejects_identical_envs() {
        let olat = sphere_olat(12, 16);
        let env = random_env(8, 1);
        let err = make_harmonization_pair(&olat, &env, &env.clone(), &View::default());
        assert!(matches!(err, Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn harmonization_pair_equal_envs_hook_gives_identical_images() {
        let olat = sphere_olat(12, 16);
        let env = random_env(8, 2);
        let pair =
            make_harmonization_pair_unchecked(&olat, &env, &env.clone(), &View::default())
                .unwrap();
        assert_eq!(pair.composite_input.data(), pair.target.data());
    }

    #[test]
    fn harmonization_pair_black_env_a_gives_black_foreground() {
        let olat = sphere_olat(12, 16);
        let black = EnvMap::splat(8, 0.0);
        let lit = random_env(8, 3);
        let pair = make_harmonization_pair(&olat, &black, &lit, &View::default()).unwrap();
        let mut lit_bg = 0usize;
        for y in 0..12 {
            for x in 0..12 {
                let a = olat.alpha.get(x, y, 0);
                for c in 0..3 {
                    let v = pair.composite_input.get(x, y, c);
                    if a == 1.0 {
                        assert_eq!(v, 0.0, "foreground must be black");
                    }
                }
                if a == 0.0 && pair.composite_input.get(x, y, 0) > 0.0 {
                    lit_bg += 1;
                }
            }
        }
        assert!(lit_bg > 0, "background should be lit");
    }

    #[test]
    fn harmonization_pair_backgrounds_agree_outside_mask() {
        let olat = sphere_olat(12, 16);
        let a = random_env(8, 4);
        let b = random_env(8, 5);
        let pair = make_harmonization_pair(&olat, &a, &b, &View::default()).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                if pair.mask.get(x, y, 0) == 0.0 {
                    for c in 0..3 {
                        assert_eq!(
                            pair.composite_input.get(x, y, c),
                            pair.target.get(x, y, c)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn deshadow_pair_constant_env_is_identity() {
        let olat = sphere_olat(12, 24);
        let env = EnvMap::splat(8, 0.5);
        let pair = make_deshadow_pair(&olat, &env, &View::default(), 0.4).unwrap();
        for i in 0..pair.input.data().len() {
            assert!(
                (pair.input.data()[i] - pair.target.data()[i]).abs() <= 1e-4,
                "index {i}"
            );
        }
    }

    #[test]
    fn deshadow_pair_reduces_contrast_and_keeps_energy() {
        let olat = sphere_olat(24, 96);
        // Single dominant frontal-ish light plus a small ambient floor.
        let h = 16;
        let mut img = Image::splat(2 * h, h, 3, 0.05);
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..3 {
                    img.set(h + dx, h / 2 + dy, c, 8.0);
                }
            }
        }
        let env = EnvMap::new(img).unwrap();
        let pair = make_deshadow_pair(&olat, &env, &View::default(), 0.3).unwrap();

        let stats = |img: &Image| {
            let mut vals = Vec::new();
            for y in 0..olat.height() {
                for x in 0..olat.width() {
                    if olat.alpha.get(x, y, 0) > 0.5 {
                        vals.push(img.to_luma().get(x, y, 0));
                    }
                }
            }
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let max = vals.iter().cloned().fold(0.0f32, f32::max) as f64;
            (mean, max / mean)
        };
        let (mean_in, contrast_in) = stats(&pair.input);
        let (mean_tg, contrast_tg) = stats(&pair.target);
        assert!(
            contrast_tg < contrast_in,
            "diffused target must be flatter: {contrast_tg} vs {contrast_in}"
        );
        assert!(
            (mean_in - mean_tg).abs() / mean_in <= 0.05,
            "foreground energy moved too much: {mean_in} vs {mean_tg}"
        );
    }

    #[test]
    fn olat_set_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let olat = sphere_olat(8, 12);
        olat.save(dir.path()).unwrap();
        let back = OLATSet::load(dir.path()).unwrap();
        assert_eq!(back.count(), olat.count());
        assert_eq!(back.alpha.data(), olat.alpha.data());
        for (a, b) in olat.images.iter().zip(&back.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn olat_set_rejects_bad_rigs() {
        let img = Image::zeros(4, 4, 3);
        let alpha = Image::zeros(4, 4, 1);
        // Non-unit direction.
        let bad = vec![Light {
            direction: [0.0, 0.0, 2.0],
            solid_angle: 4.0 * PI,
        }];
        assert!(OLATSet::new(bad, vec![img.clone()], alpha.clone()).is_err());
        // Solid angles not covering the sphere.
        let bad = vec![Light {
            direction: [0.0, 0.0, 1.0],
            solid_angle: 1.0,
        }];
        assert!(OLATSet::new(bad, vec![img], alpha).is_err());
    }
}
