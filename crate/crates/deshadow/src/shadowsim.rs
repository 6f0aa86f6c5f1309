//! External-occluder shadow synthesis: point lights, analytic occluder
//! primitives, per-pixel visibility along the surface-to-light segment, and
//! the ratio-based shading that stamps shadows onto already-lit images.
//!
//! Camera space follows the usual CV convention: x right, y down, z forward
//! (positive depth), camera at the origin.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_image, write_image, ImageFormat};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

/// Per-pixel geometry: metric depth, normals encoded as `(n+1)/2`, and the
/// camera that produced them.
#[derive(Debug, Clone)]
pub struct GeometryMaps {
    pub depth: Image,
    pub normal: Image,
    pub camera: CameraIntrinsics,
}

impl GeometryMaps {
    pub fn new(depth: Image, normal: Image, camera: CameraIntrinsics) -> Result<Self> {
        if depth.channels() != 1 {
            return Err(Error::InvalidImage("depth must be 1-channel".into()));
        }
        if normal.channels() != 3
            || normal.width() != depth.width()
            || normal.height() != depth.height()
        {
            return Err(Error::DimensionMismatch(
                "normal map must be 3-channel and match depth".into(),
            ));
        }
        Ok(Self {
            depth,
            normal,
            camera,
        })
    }

    /// Checks the foreground invariants: positive depth and near-unit decoded
    /// normals wherever `mask > 0`.
    pub fn validate_against(&self, mask: &Image) -> Result<()> {
        for y in 0..self.depth.height() {
            for x in 0..self.depth.width() {
                if mask.get(x, y, 0) > 0.0 {
                    if self.depth.get(x, y, 0) <= 0.0 {
                        return Err(Error::InvalidImage(format!(
                            "non-positive depth at foreground pixel ({x},{y})"
                        )));
                    }
                    let n = self.decode_normal(x, y);
                    if (n.norm() - 1.0).abs() > 1e-2 {
                        return Err(Error::InvalidImage(format!(
                            "normal at ({x},{y}) has norm {}",
                            n.norm()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Decodes the `(n+1)/2` normal encoding at a pixel.
    pub fn decode_normal(&self, x: usize, y: usize) -> Vector3<f32> {
        Vector3::new(
            2.0 * self.normal.get(x, y, 0) - 1.0,
            2.0 * self.normal.get(x, y, 1) - 1.0,
            2.0 * self.normal.get(x, y, 2) - 1.0,
        )
    }

    /// Back-projects a pixel to its camera-space 3-D point.
    pub fn unproject(&self, x: usize, y: usize) -> Vector3<f32> {
        let z = self.depth.get(x, y, 0);
        Vector3::new(
            (x as f32 + 0.5 - self.camera.cx) * z / self.camera.fx,
            (y as f32 + 0.5 - self.camera.cy) * z / self.camera.fy,
            z,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cam_path = dir.join("camera.json");
        let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let camera: CameraIntrinsics = serde_json::from_str(&text)?;
        Self::new(
            read_image(dir.join("depth.pfm"))?,
            read_image(dir.join("normal.pfm"))?,
            camera,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cam_path = dir.join("camera.json");
        std::fs::write(&cam_path, serde_json::to_string_pretty(&self.camera)?)
            .map_err(|e| Error::io(&cam_path, e))?;
        write_image(dir.join("depth.pfm"), &self.depth, ImageFormat::Pfm)?;
        write_image(dir.join("normal.pfm"), &self.normal, ImageFormat::Pfm)
    }
}

/// Point light in camera space.
#[derive(Debug, Clone, Copy)]
pub struct PointLight {
    pub position: Vector3<f32>,
    pub intensity: f32,
    pub color: [f32; 3],
}

impl PointLight {
    pub fn new(position: Vector3<f32>, intensity: f32, color: [f32; 3]) -> Result<Self> {
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "light intensity must be finite and >= 0, got {intensity}"
            )));
        }
        if color.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidArgument("light color must be >= 0".into()));
        }
        Ok(Self {
            position,
            intensity,
            color,
        })
    }
}

/// Axis-aligned subject bounding box used to validate occluder placement.
#[derive(Debug, Clone, Copy)]
pub struct SubjectBounds {
    pub center: Vector3<f32>,
    pub half_extents: Vector3<f32>,
}

impl SubjectBounds {
    /// The canonical desk-scene subject: head-and-shoulders around z = 2 m.
    pub fn canonical() -> Self {
        Self {
            center: Vector3::new(0.0, 0.0, 2.0),
            half_extents: Vector3::new(0.45, 0.6, 0.45),
        }
    }

    fn contains(&self, p: Vector3<f32>) -> bool {
        let d = p - self.center;
        d.x.abs() <= self.half_extents.x
            && d.y.abs() <= self.half_extents.y
            && d.z.abs() <= self.half_extents.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderKind {
    Sphere,
    Box,
    Blob,
}

/// Analytic occluder: a sphere, an oriented cube, or a union-of-spheres blob.
/// `size` is the object's diameter scale in meters.
#[derive(Debug, Clone)]
pub struct OccluderSpec {
    pub kind: OccluderKind,
    pub center: Vector3<f32>,
    pub orientation: Rotation3<f32>,
    pub size: f32,
    /// Blob lobes as (offset from center, radius), derived from seed + count.
    pub lobes: Vec<(Vector3<f32>, f32)>,
    /// Penumbra width: visibility ramps over this clearance. 0 means hard.
    pub r_soft: f32,
}

impl OccluderSpec {
    /// Validated construction: the occluder must sit strictly between the
    /// light and the subject bounds, outside both.
    pub fn validated(
        kind: OccluderKind,
        center: Vector3<f32>,
        orientation: Rotation3<f32>,
        size: f32,
        blob_seed: u64,
        lobe_count: usize,
        r_soft: f32,
        light: &PointLight,
        subject: &SubjectBounds,
    ) -> Result<Self> {
        if !(size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "occluder size must be positive, got {size}"
            )));
        }
        if r_soft < 0.0 {
            return Err(Error::InvalidArgument("r_soft must be >= 0".into()));
        }
        let axis = subject.center - light.position;
        let t = (center - light.position).dot(&axis) / axis.norm_squared();
        if !(0.0..1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "occluder is not between light and subject (t = {t})"
            )));
        }
        if subject.contains(center) {
            return Err(Error::InvalidArgument(
                "occluder center lies inside the subject bounds".into(),
            ));
        }
        if (center - light.position).norm() <= size * 0.5 {
            return Err(Error::InvalidArgument(
                "occluder would swallow the light".into(),
            ));
        }
        let lobes = if kind == OccluderKind::Blob {
            blob_lobes(blob_seed, lobe_count, size)
        } else {
            Vec::new()
        };
        Ok(Self {
            kind,
            center,
            orientation,
            size,
            lobes,
            r_soft,
        })
    }

    /// Similarity transform that preserves the shadow cone from `apex`:
    /// translate along the apex axis by factor `s`, scaling the shape by `s`.
    pub fn scaled_along_axis(&self, apex: Vector3<f32>, s: f32) -> OccluderSpec {
        OccluderSpec {
            kind: self.kind,
            center: apex + (self.center - apex) * s,
            orientation: self.orientation,
            size: self.size * s,
            lobes: self
                .lobes
                .iter()
                .map(|(off, r)| (off * s, r * s))
                .collect(),
            r_soft: self.r_soft * s,
        }
    }
}

fn blob_lobes(seed: u64, count: usize, size: f32) -> Vec<(Vector3<f32>, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let off = Vector3::new(
                (rng.gen::<f32>() - 0.5) * 0.6 * size,
                (rng.gen::<f32>() - 0.5) * 0.6 * size,
                (rng.gen::<f32>() - 0.5) * 0.6 * size,
            );
            let r = (0.25 + 0.25 * rng.gen::<f32>()) * size;
            (off, r)
        })
        .collect()
}

/// Shortest distance from point `c` to the segment `a`-`b`.
fn segment_point_distance(a: Vector3<f32>, b: Vector3<f32>, c: Vector3<f32>) -> f32 {
    let ab = b - a;
    let t = ((c - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (a + ab * t - c).norm()
}

/// Does the segment `a`-`b` intersect the oriented cube?
fn segment_hits_box(
    a: Vector3<f32>,
    b: Vector3<f32>,
    center: Vector3<f32>,
    orientation: &Rotation3<f32>,
    half: f32,
) -> bool {
    let inv = orientation.inverse();
    let la = inv * (a - center);
    let lb = inv * (b - center);
    let d = lb - la;
    let mut tmin = 0.0f32;
    let mut tmax = 1.0f32;
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            if la[i].abs() > half {
                return false;
            }
        } else {
            let mut t1 = (-half - la[i]) / d[i];
            let mut t2 = (half - la[i]) / d[i];
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
            if tmin > tmax {
                return false;
            }
        }
    }
    true
}

/// Visibility of the light from camera-space point `p`: 1 clear, 0 blocked,
/// with a clearance-based soft edge for spheres and blobs.
pub fn visibility_from_point(p: Vector3<f32>, light: &PointLight, occ: &OccluderSpec) -> f32 {
    let soft = |clearance: f32| -> f32 {
        if clearance <= 0.0 {
            0.0
        } else if occ.r_soft > 0.0 {
            (clearance / occ.r_soft).min(1.0)
        } else {
            1.0
        }
    };
    match occ.kind {
        OccluderKind::Sphere => {
            let d = segment_point_distance(p, light.position, occ.center);
            soft(d - occ.size * 0.5)
        }
        OccluderKind::Blob => {
            let mut vis = 1.0f32;
            for (off, r) in &occ.lobes {
                let d = segment_point_distance(p, light.position, occ.center + off);
                vis = vis.min(soft(d - r));
                if vis == 0.0 {
                    break;
                }
            }
            vis
        }
        OccluderKind::Box => {
            if segment_hits_box(
                p,
                light.position,
                occ.center,
                &occ.orientation,
                occ.size * 0.5,
            ) {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Visibility at a pixel, using the geometry maps to recover the 3-D point.
pub fn visibility(
    geom: &GeometryMaps,
    light: &PointLight,
    occ: &OccluderSpec,
    px: usize,
    py: usize,
) -> f32 {
    visibility_from_point(geom.unproject(px, py), light, occ)
}

/// Result of stamping an external shadow onto an image.
#[derive(Debug, Clone)]
pub struct ShadowedImage {
    pub shadowed: Image,
    pub shadow_mask: Image,
}

/// Multiplies each foreground pixel by `shade / shade_ref` where
/// `shade = ambient + (1-ambient) * max(0, n.l) * visibility` and `shade_ref`
/// is the same expression with full visibility. Unoccluded pixels are exactly
/// unchanged; background pixels are untouched.
pub fn cast_shadow(
    img: &Image,
    mask: &Image,
    geom: &GeometryMaps,
    light: &PointLight,
    occ: &OccluderSpec,
    ambient: f32,
) -> Result<ShadowedImage> {
    if !(0.0..1.0).contains(&ambient) {
        return Err(Error::InvalidArgument(format!(
            "ambient must lie in [0,1), got {ambient}"
        )));
    }
    if mask.width() != img.width() || mask.height() != img.height() || mask.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "mask must be 1-channel and match the image".into(),
        ));
    }
    if geom.depth.width() != img.width() || geom.depth.height() != img.height() {
        return Err(Error::DimensionMismatch(
            "geometry maps must match the image".into(),
        ));
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut shadowed = img.clone();
    let mut shadow_mask = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) <= 0.0 {
                continue;
            }
            let p = geom.unproject(x, y);
            let n = geom.decode_normal(x, y).normalize();
            let l = (light.position - p).normalize();
            let lambert = n.dot(&l).max(0.0);
            let vis = visibility_from_point(p, light, occ);
            let shade = ambient + (1.0 - ambient) * lambert * vis;
            let shade_ref = ambient + (1.0 - ambient) * lambert;
            let ratio = if shade_ref > 0.0 { shade / shade_ref } else { 1.0 };
            for c in 0..ch {
                let i = shadowed.idx(x, y, c);
                shadowed.data_mut()[i] = img.get(x, y, c) * ratio;
            }
            shadow_mask.set(x, y, 0, 1.0 - vis);
        }
    }
    Ok(ShadowedImage {
        shadowed,
        shadow_mask,
    })
}

/// Deterministic sampler for shadow-augmentation configs. `difficulty` in
/// [0,1] scales the occluder up and the ambient floor down.
pub fn random_occlusion(seed: u64, difficulty: f32) -> (PointLight, OccluderSpec, f32) {
    let difficulty = difficulty.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let subject = SubjectBounds::canonical();

    let light_pos = Vector3::new(
        (rng.gen::<f32>() - 0.5) * 1.6,
        (rng.gen::<f32>() - 0.5) * 1.2,
        0.2 + 0.6 * rng.gen::<f32>(),
    );
    let light = PointLight::new(light_pos, 1.0, [1.0, 1.0, 1.0]).expect("valid light");

    let t = 0.35 + 0.3 * rng.gen::<f32>();
    let along = light_pos + (subject.center - light_pos) * t;
    let jitter = Vector3::new(
        (rng.gen::<f32>() - 0.5) * 0.12,
        (rng.gen::<f32>() - 0.5) * 0.12,
        0.0,
    );
    let size = 0.05 + 0.30 * difficulty + 0.04 * rng.gen::<f32>();
    let kind = match rng.gen_range(0..3) {
        0 => OccluderKind::Sphere,
        1 => OccluderKind::Box,
        _ => OccluderKind::Blob,
    };
    let orientation = Rotation3::from_euler_angles(
        rng.gen::<f32>() * std::f32::consts::TAU,
        rng.gen::<f32>() * std::f32::consts::TAU,
        rng.gen::<f32>() * std::f32::consts::TAU,
    );
    let blob_seed = rng.gen::<u64>();
    let lobe_count = rng.gen_range(2..=4);
    let r_soft = 0.01 + 0.02 * rng.gen::<f32>();
    let occ = OccluderSpec::validated(
        kind,
        along + jitter,
        orientation,
        size,
        blob_seed,
        lobe_count,
        r_soft,
        &light,
        &subject,
    )
    .expect("sampled occluder satisfies placement invariants");

    let ambient = (0.75 - 0.55 * difficulty) + (rng.gen::<f32>() - 0.5) * 0.08;
    let ambient = ambient.clamp(0.02, 0.95);
    (light, occ, ambient)
}
