//! Synthetic multi-view scenes with analytic ground truth.
//!
//! A scene is a textured surface (plane, sphere or a two-plane step) seen by
//! a small arc of cameras looking at the origin. Depth comes from exact
//! ray-surface intersection, images from texture lookup at the hit point,
//! and the ground-truth cloud from back-projected depth samples — so every
//! derived quantity has a closed-form reference. The texture is a checker
//! modulated by multi-octave value noise: non-periodic at matching scale, so
//! the correct depth is the unique correlation maximum.

use crate::camera::{read_camera_file, write_camera_file, DepthField, DepthMap, PixelMask, ViewCamera};
use crate::fusion::PointCloud;
use crate::grid::ValueGrid;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("resolution {height}×{width} must be a positive multiple of 4")]
    BadResolution { height: usize, width: usize },
    #[error("scene needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("geometry is outside every camera frustum")]
    NothingVisible,
    #[error("unknown geometry {0:?}")]
    UnknownGeometry(String),
    #[error("scene file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
}

/// Surface shapes with closed-form ray intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    /// The world plane z = 0.
    Plane,
    /// Sphere centered at the origin.
    Sphere { radius: f64 },
    /// Background plane z = 0 plus a foreground half-plane z = −gap
    /// covering world x ≥ 0 (occluding the background near the edge).
    TwoPlaneStep { gap: f64 },
}

impl Geometry {
    pub fn parse(name: &str, param: f64) -> Result<Geometry, SceneError> {
        match name {
            "plane" => Ok(Geometry::Plane),
            "sphere" => Ok(Geometry::Sphere { radius: param }),
            "two-plane" | "step" => Ok(Geometry::TwoPlaneStep { gap: param }),
            other => Err(SceneError::UnknownGeometry(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Geometry::Plane => "plane",
            Geometry::Sphere { .. } => "sphere",
            Geometry::TwoPlaneStep { .. } => "two-plane",
        }
    }

    /// Smallest positive ray parameter of `origin + s·dir` hitting the
    /// surface. With `dir` scaled so its camera-frame z is 1, `s` is the
    /// camera depth.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Geometry::Plane => {
                if dir.z.abs() < 1e-15 {
                    return None;
                }
                let s = -origin.z / dir.z;
                (s > 0.0).then_some(s)
            }
            Geometry::Sphere { radius } => {
                let a = dir.dot(dir);
                let b = 2.0 * origin.dot(dir);
                let c = origin.dot(origin) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let s0 = (-b - sq) / (2.0 * a);
                let s1 = (-b + sq) / (2.0 * a);
                if s0 > 0.0 {
                    Some(s0)
                } else if s1 > 0.0 {
                    Some(s1)
                } else {
                    None
                }
            }
            Geometry::TwoPlaneStep { gap } => {
                let mut best: Option<f64> = None;
                if dir.z.abs() >= 1e-15 {
                    let s_fore = (-gap - origin.z) / dir.z;
                    if s_fore > 0.0 && origin.x + s_fore * dir.x >= 0.0 {
                        best = Some(s_fore);
                    }
                    let s_back = -origin.z / dir.z;
                    if s_back > 0.0 && best.map(|b| s_back < b).unwrap_or(true) {
                        best = Some(s_back);
                    }
                }
                best
            }
        }
    }

    /// Distance of a point to the surface; for verifying that samples lie on
    /// the geometry.
    pub fn surface_distance(&self, p: &[f64; 3]) -> f64 {
        match *self {
            Geometry::Plane => p[2].abs(),
            Geometry::Sphere { radius } => {
                ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius).abs()
            }
            Geometry::TwoPlaneStep { gap } => {
                let back = p[2].abs();
                if p[0] >= 0.0 {
                    back.min((p[2] + gap).abs())
                } else {
                    back
                }
            }
        }
    }
}

/// Everything needed to generate one scene.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub geometry: Geometry,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels (principal point at the image center).
    pub focal: f64,
    /// Camera distance from the origin.
    pub arc_radius: f64,
    /// Total angular span of the camera arc, degrees.
    pub arc_span_deg: f64,
    pub depth_range: (f64, f64),
    /// Checker period in world units.
    pub checker_period: f64,
    /// Value-noise octave scales in world units.
    pub noise_scales: Vec<f64>,
    /// Noise modulation strength in [0, 1).
    pub noise_amplitude: f64,
    /// Stride for sampling the ground-truth cloud from the depth maps.
    pub cloud_stride: usize,
}

impl SceneSpec {
    /// The standard desk-scale five-view noise-checker plane.
    pub fn standard_plane() -> SceneSpec {
        SceneSpec {
            geometry: Geometry::Plane,
            views: 5,
            height: 64,
            width: 80,
            focal: 70.0,
            arc_radius: 2.0,
            arc_span_deg: 24.0,
            depth_range: (1.2, 3.2),
            checker_period: 0.25,
            noise_scales: vec![0.12, 0.3, 0.8],
            noise_amplitude: 0.55,
            cloud_stride: 2,
        }
    }

    pub fn standard_sphere() -> SceneSpec {
        SceneSpec {
            geometry: Geometry::Sphere { radius: 0.9 },
            ..SceneSpec::standard_plane()
        }
    }

    pub fn standard_two_plane() -> SceneSpec {
        SceneSpec {
            geometry: Geometry::TwoPlaneStep { gap: 0.35 },
            ..SceneSpec::standard_plane()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(SceneError::BadResolution {
                height: self.height,
                width: self.width,
            });
        }
        if self.views < 2 {
            return Err(SceneError::TooFewViews(self.views));
        }
        Ok(())
    }

    fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            (self.width as f64 - 1.0) / 2.0,
            0.0,
            self.focal,
            (self.height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Cameras on an arc in the x–z plane, all looking at the origin.
    pub fn rig(&self) -> Result<Vec<ViewCamera>, SceneError> {
        let mut cams = Vec::with_capacity(self.views);
        let span = self.arc_span_deg.to_radians();
        for v in 0..self.views {
            let theta = if self.views == 1 {
                0.0
            } else {
                span * (v as f64 / (self.views - 1) as f64 - 0.5)
            };
            let center = Vector3::new(
                self.arc_radius * theta.sin(),
                0.0,
                -self.arc_radius * theta.cos(),
            );
            let z_axis = (-center).normalize();
            let up = Vector3::new(0.0, 1.0, 0.0);
            let x_axis = up.cross(&z_axis).normalize();
            let y_axis = z_axis.cross(&x_axis);
            let rotation = Matrix3::from_rows(&[
                x_axis.transpose(),
                y_axis.transpose(),
                z_axis.transpose(),
            ]);
            let translation = -rotation * center;
            cams.push(ViewCamera::new(
                self.intrinsics(),
                rotation,
                translation,
                self.depth_range,
            )?);
        }
        Ok(cams)
    }
}

/// Smooth value noise: bilinear interpolation of hashed lattice values,
/// summed over octaves. Deterministic in (seed, position).
#[derive(Clone, Debug)]
struct TextureField {
    seed: u64,
    checker_period: f64,
    noise_scales: Vec<f64>,
    noise_amplitude: f64,
}

impl TextureField {
    fn lattice(&self, channel: u64, octave: u64, ix: i64, iy: i64) -> f64 {
        let mut h = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(channel.wrapping_mul(0xbf58476d1ce4e5b9))
            .wrapping_add(octave.wrapping_mul(0x94d049bb133111eb))
            .wrapping_add((ix as u64).wrapping_mul(0xff51afd7ed558ccd))
            .wrapping_add((iy as u64).wrapping_mul(0xc4ceb9fe1a85ec53));
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51afd7ed558ccd);
        h ^= h >> 33;
        h as f64 / u64::MAX as f64
    }

    fn noise(&self, channel: u64, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut weight = 0.0;
        let mut amp = 1.0;
        for (o, &scale) in self.noise_scales.iter().enumerate() {
            let gx = x / scale;
            let gy = y / scale;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let o = o as u64;
            let v = (1.0 - fy)
                * ((1.0 - fx) * self.lattice(channel, o, x0, y0)
                    + fx * self.lattice(channel, o, x0 + 1, y0))
                + fy * ((1.0 - fx) * self.lattice(channel, o, x0, y0 + 1)
                    + fx * self.lattice(channel, o, x0 + 1, y0 + 1));
            total += amp * v;
            weight += amp;
            amp *= 0.6;
        }
        total / weight
    }

    /// RGB in [0, 1] at a surface point.
    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let cx = (x / self.checker_period).floor() as i64;
        let cy = (y / self.checker_period).floor() as i64;
        let checker = if (cx + cy).rem_euclid(2) == 0 { 0.85 } else { 0.35 };
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let n = self.noise(c as u64, x, y);
            *v = (checker * (1.0 - self.noise_amplitude + self.noise_amplitude * 2.0 * n))
                .clamp(0.0, 1.0);
        }
        rgb
    }
}

/// A generated scene: cameras, rendered images, analytic depth maps, the
/// ground-truth cloud, and continuous analytic depth lookups.
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub cameras: Vec<ViewCamera>,
    /// `[H, W, 3]` in [0, 1], quantized to 8-bit levels (identical to what
    /// the image files store).
    pub images: Vec<ValueGrid>,
    /// Analytic depth; pixels whose ray misses the surface hold 0.
    pub gt_depths: Vec<DepthMap>,
    pub gt_cloud: PointCloud,
    texture: TextureField,
}

impl SyntheticScene {
    /// Casts the view ray through a continuous pixel and returns the exact
    /// camera depth of the nearest surface.
    pub fn depth_at(&self, view: usize, x: f64, y: f64) -> Option<f64> {
        let cam = &self.cameras[view];
        let kinv = cam.intrinsics.try_inverse().expect("invertible");
        let dir = cam.rotation.transpose() * (kinv * Vector3::new(x, y, 1.0));
        let origin = cam.center();
        self.spec.geometry.intersect(&origin, &dir)
    }

    /// Bounded analytic depth lookup for one view.
    pub fn depth_field(&self, view: usize) -> AnalyticDepth<'_> {
        AnalyticDepth {
            scene: self,
            view,
            scale: 1.0,
        }
    }

    /// Analytic depth lookup in the pixel coordinates of a stage scaled by
    /// `scale` (e.g. 0.25 for quarter resolution).
    pub fn depth_field_scaled(&self, view: usize, scale: f64) -> AnalyticDepth<'_> {
        AnalyticDepth {
            scene: self,
            view,
            scale,
        }
    }

    /// Pixels of `ref_view` whose surface point is visible (not occluded,
    /// in bounds) in `src_view`.
    pub fn covisibility(&self, ref_view: usize, src_view: usize) -> PixelMask {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut mask = PixelMask::filled(h, w, false);
        let ref_cam = &self.cameras[ref_view];
        let src_cam = &self.cameras[src_view];
        for y in 0..h {
            for x in 0..w {
                if !self.gt_depths[ref_view].is_valid(y, x) {
                    continue;
                }
                let d = self.gt_depths[ref_view].at(y, x);
                let Ok(world) = ref_cam.backproject([x as f64, y as f64], d) else {
                    continue;
                };
                let Ok((pix, depth_in_src)) = src_cam.project(&world) else {
                    continue;
                };
                if pix[0] < 0.0
                    || pix[1] < 0.0
                    || pix[0] > (w - 1) as f64
                    || pix[1] > (h - 1) as f64
                {
                    continue;
                }
                let Some(surface) = self.depth_at(src_view, pix[0], pix[1]) else {
                    continue;
                };
                // Occluded when the source sees a nearer surface.
                mask.set(y, x, (surface - depth_in_src).abs() <= 1e-9 * depth_in_src);
            }
        }
        mask
    }

    /// Writes images (`view_###.ppm`), cameras (`cam_###.txt`), depth maps
    /// (`depth_###.dmap`) and the ground-truth cloud (`gt.ply`).
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir)?;
        for v in 0..self.spec.views {
            write_ppm(&self.images[v], &dir.join(format!("view_{v:03}.ppm")))?;
            write_camera_file(&self.cameras[v], &dir.join(format!("cam_{v:03}.txt")))?;
            self.gt_depths[v].write_dmap(&dir.join(format!("depth_{v:03}.dmap")))?;
        }
        self.gt_cloud
            .write_ply(&dir.join("gt.ply"))
            .map_err(|e| SceneError::Format {
                path: dir.join("gt.ply").display().to_string(),
                detail: e.to_string(),
            })?;
        Ok(())
    }
}

/// Continuous analytic depth of one view, bounded to the image rectangle
/// (in the coordinates of a stage scaled by `scale`).
pub struct AnalyticDepth<'a> {
    scene: &'a SyntheticScene,
    view: usize,
    scale: f64,
}

impl DepthField for AnalyticDepth<'_> {
    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        let w = self.scene.spec.width as f64 * self.scale;
        let h = self.scene.spec.height as f64 * self.scale;
        if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
            return None;
        }
        // Cast the ray through the equivalent full-resolution coordinate.
        let fx = (x + 0.5) / self.scale - 0.5;
        let fy = (y + 0.5) / self.scale - 0.5;
        self.scene.depth_at(self.view, fx, fy)
    }
}

/// Generates the scene: exact depths by ray casting, images by texture
/// lookup at the hit points (8-bit quantized), and the ground-truth cloud
/// by back-projecting every `cloud_stride`-th valid pixel of every view.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let cameras = spec.rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = TextureField {
        seed: rng.gen(),
        checker_period: spec.checker_period,
        noise_scales: spec.noise_scales.clone(),
        noise_amplitude: spec.noise_amplitude,
    };
    let (h, w) = (spec.height, spec.width);
    let mut images = Vec::with_capacity(spec.views);
    let mut gt_depths = Vec::with_capacity(spec.views);
    let mut any_hit = false;
    for cam in &cameras {
        let kinv = cam.intrinsics.try_inverse().expect("invertible");
        let origin = cam.center();
        let mut img = ValueGrid::zeros(&[h, w, 3]);
        let mut depth = DepthMap::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let dir = cam.rotation.transpose()
                    * (kinv * Vector3::new(x as f64, y as f64, 1.0));
                match spec.geometry.intersect(&origin, &dir) {
                    Some(s) => {
                        any_hit = true;
                        depth.set(y, x, s);
                        let hit = origin + dir * s;
                        let rgb = texture.color(hit.x, hit.y);
                        for c in 0..3 {
                            img.set(&[y, x, c], quantize8(rgb[c]));
                        }
                    }
                    None => {
                        for c in 0..3 {
                            img.set(&[y, x, c], quantize8(0.12));
                        }
                    }
                }
            }
        }
        images.push(img);
        gt_depths.push(depth);
    }
    if !any_hit {
        return Err(SceneError::NothingVisible);
    }

    let mut gt_cloud = PointCloud::default();
    for (v, cam) in cameras.iter().enumerate() {
        for y in (0..h).step_by(spec.cloud_stride) {
            for x in (0..w).step_by(spec.cloud_stride) {
                if !gt_depths[v].is_valid(y, x) {
                    continue;
                }
                let p = cam.backproject([x as f64, y as f64], gt_depths[v].at(y, x))?;
                gt_cloud.points.push([p.x, p.y, p.z]);
                gt_cloud.sources.push(v as u32);
            }
        }
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        cameras,
        images,
        gt_depths,
        gt_cloud,
        texture,
    })
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Binary 8-bit PPM (P6).
pub fn write_ppm(image: &ValueGrid, path: &Path) -> Result<(), SceneError> {
    let shape = image.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in image.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ValueGrid, SceneError> {
    let bytes = std::fs::read(path)?;
    let fail = |detail: &str| SceneError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    // Header: three whitespace-separated tokens after the magic.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8], pos: &mut usize| -> Result<String, SceneError> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&bytes, &mut pos)? != "P6" {
        return Err(fail("not a P6 ppm"));
    }
    let w: usize = token(&bytes, &mut pos)?.parse().map_err(|_| fail("bad width"))?;
    let h: usize = token(&bytes, &mut pos)?.parse().map_err(|_| fail("bad height"))?;
    let maxval: usize = token(&bytes, &mut pos)?.parse().map_err(|_| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail("only 8-bit ppm supported"));
    }
    pos += 1; // single whitespace after maxval
    let body = &bytes[pos..];
    if body.len() != h * w * 3 {
        return Err(fail(&format!(
            "expected {} bytes of pixels, found {}",
            h * w * 3,
            body.len()
        )));
    }
    let data: Vec<f64> = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ValueGrid::from_vec(&[h, w, 3], data).expect("sized"))
}

/// Scene inputs re-read from a directory written by
/// [`SyntheticScene::write_to_dir`]: images, cameras and ground-truth depth
/// grids (analytic lookups are not recoverable from files).
pub struct LoadedScene {
    pub cameras: Vec<ViewCamera>,
    pub images: Vec<ValueGrid>,
    pub gt_depths: Vec<DepthMap>,
}

pub fn load_scene_dir(dir: &Path) -> Result<LoadedScene, SceneError> {
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut gt_depths = Vec::new();
    for v in 0.. {
        let cam_path = dir.join(format!("cam_{v:03}.txt"));
        if !cam_path.exists() {
            break;
        }
        cameras.push(read_camera_file(&cam_path)?);
        images.push(read_ppm(&dir.join(format!("view_{v:03}.ppm")))?);
        let dmap = dir.join(format!("depth_{v:03}.dmap"));
        if dmap.exists() {
            gt_depths.push(DepthMap::read_dmap(&dmap)?);
        }
    }
    if cameras.len() < 2 {
        return Err(SceneError::TooFewViews(cameras.len()));
    }
    Ok(LoadedScene {
        cameras,
        images,
        gt_depths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::reprojection_errors_host;

    fn tiny_spec(geometry: Geometry) -> SceneSpec {
        SceneSpec {
            geometry,
            views: 3,
            height: 24,
            width: 32,
            focal: 30.0,
            arc_radius: 2.0,
            arc_span_deg: 20.0,
            depth_range: (1.2, 3.2),
            checker_period: 0.25,
            noise_scales: vec![0.12, 0.3],
            noise_amplitude: 0.5,
            cloud_stride: 2,
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth_for_axis_camera() {
        let spec = SceneSpec {
            views: 2,
            arc_span_deg: 0.0,
            ..tiny_spec(Geometry::Plane)
        };
        let scene = generate(&spec, 0).unwrap();
        // Every camera on a zero-span arc sits on the axis looking straight
        // at the plane: depth is the arc radius everywhere.
        for v in 0..2 {
            for &d in &scene.gt_depths[v].data {
                assert!((d - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_depth_is_symmetric_with_minimum_at_center() {
        let spec = SceneSpec {
            views: 2,
            arc_span_deg: 0.0,
            ..tiny_spec(Geometry::Sphere { radius: 0.9 })
        };
        let scene = generate(&spec, 1).unwrap();
        let d = &scene.gt_depths[0];
        // The principal point (between pixels for even resolutions) sees the
        // nearest point of the sphere at exactly radius − r.
        let cx = (spec.width as f64 - 1.0) / 2.0;
        let cy = (spec.height as f64 - 1.0) / 2.0;
        let center_depth = scene.depth_at(0, cx, cy).unwrap();
        assert!((center_depth - (2.0 - 0.9)).abs() < 1e-12);
        for y in 0..spec.height {
            for x in 0..spec.width {
                if d.is_valid(y, x) {
                    assert!(d.at(y, x) >= center_depth - 1e-12);
                }
            }
        }
        // Depth profile is mirror-symmetric about the principal column.
        let row = 11;
        for k in 0..12 {
            let a = d.at(row, 15 - k);
            let b = d.at(row, 16 + k);
            if a > 0.0 && b > 0.0 {
                assert!((a - b).abs() < 1e-9, "asymmetry at offset {k}");
            }
        }
    }

    #[test]
    fn rendered_pixels_match_ray_cast_oracle() {
        let spec = tiny_spec(Geometry::Plane);
        let scene = generate(&spec, 7).unwrap();
        // Independent ray cast for a handful of pixels of view 1: closed-form
        // plane intersection, then the same texture lookup.
        let cam = &scene.cameras[1];
        let kinv = cam.intrinsics.try_inverse().unwrap();
        for &(x, y) in &[(3usize, 5usize), (16, 12), (30, 20)] {
            let dir = cam.rotation.transpose() * (kinv * Vector3::new(x as f64, y as f64, 1.0));
            let o = cam.center();
            let s = -o.z / dir.z;
            let hit = o + dir * s;
            let rgb = scene.texture.color(hit.x, hit.y);
            for c in 0..3 {
                let expected = quantize8(rgb[c]);
                assert_eq!(scene.images[1].at(&[y, x, c]), expected);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec(Geometry::Plane);
        let a = generate(&spec, 42).unwrap();
        let b = generate(&spec, 42).unwrap();
        for v in 0..spec.views {
            assert_eq!(a.images[v].data(), b.images[v].data());
            assert_eq!(a.gt_depths[v].data, b.gt_depths[v].data);
        }
        let c = generate(&spec, 43).unwrap();
        assert_ne!(a.images[0].data(), c.images[0].data());
    }

    #[test]
    fn cloud_points_lie_on_the_surface() {
        for geometry in [
            Geometry::Plane,
            Geometry::Sphere { radius: 0.9 },
            Geometry::TwoPlaneStep { gap: 0.35 },
        ] {
            let scene = generate(&tiny_spec(geometry), 3).unwrap();
            assert!(!scene.gt_cloud.is_empty());
            for p in &scene.gt_cloud.points {
                assert!(
                    geometry.surface_distance(p) < 1e-9,
                    "{:?}: point {:?} off surface",
                    geometry,
                    p
                );
            }
        }
    }

    #[test]
    fn cross_view_consistency_on_covisible_pixels() {
        for geometry in [
            Geometry::Plane,
            Geometry::Sphere { radius: 0.9 },
            Geometry::TwoPlaneStep { gap: 0.35 },
        ] {
            let scene = generate(&tiny_spec(geometry), 11).unwrap();
            for r in 0..scene.spec.views {
                for s in 0..scene.spec.views {
                    if r == s {
                        continue;
                    }
                    let covis = scene.covisibility(r, s);
                    assert!(covis.count() > 0, "{geometry:?}: no covisible pixels");
                    let field = scene.depth_field(s);
                    let (xi_p, xi_d, validity) = reprojection_errors_host(
                        &scene.gt_depths[r],
                        &field,
                        &scene.cameras[r],
                        &scene.cameras[s],
                    )
                    .unwrap();
                    for i in 0..covis.data.len() {
                        if covis.data[i] && validity.data[i] {
                            assert!(
                                xi_p.data()[i] <= 1e-6,
                                "{geometry:?} ({r}→{s}): xi_p[{i}] = {}",
                                xi_p.data()[i]
                            );
                            assert!(
                                xi_d.data()[i] <= 1e-6,
                                "{geometry:?} ({r}→{s}): xi_d[{i}] = {}",
                                xi_d.data()[i]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn two_plane_scene_has_occlusions() {
        let scene = generate(&tiny_spec(Geometry::TwoPlaneStep { gap: 0.35 }), 5).unwrap();
        // Some pixels valid in one view must be occluded in another.
        let covis = scene.covisibility(0, 2);
        let valid = scene.gt_depths[0].valid_mask();
        assert!(covis.count() < valid.count());
    }

    #[test]
    fn ppm_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join(format!("winmvs-ppm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ppm");
        let scene = generate(&tiny_spec(Geometry::Plane), 9).unwrap();
        write_ppm(&scene.images[0], &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), scene.images[0].data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scene_dir_roundtrip() {
        let dir = std::env::temp_dir().join(format!("winmvs-scene-{}", std::process::id()));
        let scene = generate(&tiny_spec(Geometry::Plane), 13).unwrap();
        scene.write_to_dir(&dir).unwrap();
        let loaded = load_scene_dir(&dir).unwrap();
        assert_eq!(loaded.cameras.len(), 3);
        assert_eq!(loaded.images[1].data(), scene.images[1].data());
        for (a, b) in loaded.gt_depths[2].data.iter().zip(&scene.gt_depths[2].data) {
            assert!((a - b).abs() < 2e-7 * a.abs().max(1.0)); // f32 storage
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
