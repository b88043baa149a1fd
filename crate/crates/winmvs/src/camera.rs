//! Projective camera machinery: projection, back-projection, plane-sweep
//! homographies, epipolar lines and forward-backward reprojection errors.
//!
//! Conventions: `x_cam = R·X + t` (world→camera), pixel (0, 0) is the center
//! of the top-left pixel, `x` runs along the width. Depth is the camera-frame
//! z of a point.

use crate::grid::ValueGrid;
use crate::tape::{Tape, TapeError, TapeResult, Var};
use nalgebra::{Matrix3, Matrix4, Vector3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("camera centers coincide, epipolar geometry is degenerate")]
    DegenerateEpipole,
    #[error("invalid camera: {0}")]
    Invalid(String),
    #[error("camera file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Intrinsics, pose and usable depth range for one view.
#[derive(Clone, Debug)]
pub struct ViewCamera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub depth_range: (f64, f64),
}

impl ViewCamera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        depth_range: (f64, f64),
    ) -> Result<Self, CameraError> {
        let rtr = rotation.transpose() * rotation;
        let ortho_err = (rtr - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(CameraError::Invalid(format!(
                "rotation is not orthonormal (error {ortho_err:.3e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(CameraError::Invalid("rotation determinant is not +1".into()));
        }
        let lower = intrinsics[(1, 0)].abs()
            + intrinsics[(2, 0)].abs()
            + intrinsics[(2, 1)].abs()
            + (intrinsics[(2, 2)] - 1.0).abs();
        if lower > 1e-12 {
            return Err(CameraError::Invalid(
                "intrinsics must be upper-triangular with unit lower-right entry".into(),
            ));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(CameraError::Invalid("focal lengths must be positive".into()));
        }
        let (dmin, dmax) = depth_range;
        if !(0.0 < dmin && dmin < dmax) {
            return Err(CameraError::Invalid(format!(
                "depth range must satisfy 0 < min < max, got [{dmin}, {dmax}]"
            )));
        }
        Ok(ViewCamera {
            intrinsics,
            rotation,
            translation,
            depth_range,
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Projects a world point; returns the pixel and its depth.
    pub fn project(&self, point: &Vector3<f64>) -> Result<([f64; 2], f64), CameraError> {
        let pc = self.rotation * point + self.translation;
        if pc.z <= 0.0 {
            return Err(CameraError::BehindCamera(pc.z));
        }
        let h = self.intrinsics * pc;
        Ok(([h.x / h.z, h.y / h.z], pc.z))
    }

    /// Inverse of [`ViewCamera::project`]: the world point seen at `pixel`
    /// with camera-frame depth `depth`.
    pub fn backproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>, CameraError> {
        if depth <= 0.0 {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let kinv = self
            .intrinsics
            .try_inverse()
            .expect("upper-triangular intrinsics with positive focals are invertible");
        let ray = kinv * Vector3::new(pixel[0], pixel[1], 1.0);
        let pc = ray * depth;
        Ok(self.rotation.transpose() * (pc - self.translation))
    }

    /// Relative pose mapping this camera's frame into `other`'s frame:
    /// `x_other = M·x_self + m`.
    pub fn relative_to(&self, other: &ViewCamera) -> (Matrix3<f64>, Vector3<f64>) {
        let m = other.rotation * self.rotation.transpose();
        let t = other.translation - m * self.translation;
        (m, t)
    }

    /// Camera for a resolution scaled by `factor` (pixel centers aligned).
    pub fn scaled(&self, factor: f64) -> ViewCamera {
        let mut k = self.intrinsics;
        k[(0, 0)] *= factor;
        k[(1, 1)] *= factor;
        k[(0, 1)] *= factor;
        k[(0, 2)] = (k[(0, 2)] + 0.5) * factor - 0.5;
        k[(1, 2)] = (k[(1, 2)] + 0.5) * factor - 0.5;
        ViewCamera {
            intrinsics: k,
            rotation: self.rotation,
            translation: self.translation,
            depth_range: self.depth_range,
        }
    }
}

/// Homography mapping reference pixels to source pixels for the
/// fronto-parallel plane at depth `d` in the reference frame.
pub fn plane_sweep_homography(
    reference: &ViewCamera,
    source: &ViewCamera,
    d: f64,
) -> Result<Matrix3<f64>, CameraError> {
    if d <= 0.0 {
        return Err(CameraError::NonPositiveDepth(d));
    }
    let (m, t) = reference.relative_to(source);
    let kinv = reference
        .intrinsics
        .try_inverse()
        .expect("intrinsics invertible");
    // Points on the plane satisfy n·x_ref = d with n the optical axis, so
    // x_src = (M + t·nᵀ/d)·x_ref.
    let n = Vector3::new(0.0, 0.0, 1.0);
    let h = source.intrinsics * (m + (t / d) * n.transpose()) * kinv;
    Ok(h)
}

pub fn apply_homography(h: &Matrix3<f64>, pixel: [f64; 2]) -> [f64; 2] {
    let p = h * Vector3::new(pixel[0], pixel[1], 1.0);
    [p.x / p.z, p.y / p.z]
}

/// Epipolar line of `pixel` in the source view, as `(a, b, c)` with
/// `a·x + b·y + c = 0` and `a² + b² = 1`.
pub fn epipolar_line(
    reference: &ViewCamera,
    source: &ViewCamera,
    pixel: [f64; 2],
) -> Result<[f64; 3], CameraError> {
    if (reference.center() - source.center()).norm() < 1e-12 {
        return Err(CameraError::DegenerateEpipole);
    }
    let (dmin, dmax) = reference.depth_range;
    let p0 = source.project(&reference.backproject(pixel, dmin)?)?.0;
    let p1 = source.project(&reference.backproject(pixel, dmax)?)?.0;
    let a = p1[1] - p0[1];
    let b = p0[0] - p1[0];
    let c = p1[0] * p0[1] - p0[0] * p1[1];
    let norm = (a * a + b * b).sqrt();
    if norm < 1e-12 {
        return Err(CameraError::DegenerateEpipole);
    }
    Ok([a / norm, b / norm, c / norm])
}

pub fn line_point_distance(line: &[f64; 3], pixel: [f64; 2]) -> f64 {
    (line[0] * pixel[0] + line[1] * pixel[1] + line[2]).abs()
}

// ── Depth maps ──────────────────────────────────────────────────────────

/// Per-pixel depth; zero or negative entries mean "no depth here".
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        DepthMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_grid(grid: &ValueGrid) -> Self {
        assert_eq!(grid.shape().len(), 2, "depth maps are two-dimensional");
        DepthMap {
            height: grid.shape()[0],
            width: grid.shape()[1],
            data: grid.data().to_vec(),
        }
    }

    pub fn to_grid(&self) -> ValueGrid {
        ValueGrid::from_vec(&[self.height, self.width], self.data.clone())
            .expect("dimensions match data")
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        let d = self.at(y, x);
        d.is_finite() && d > 0.0
    }

    pub fn valid_mask(&self) -> PixelMask {
        PixelMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&d| d.is_finite() && d > 0.0)
                .collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &DepthMap) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / self.data.len() as f64
    }

    /// Bilinear upsampling by an integer factor with pixel centers aligned;
    /// border samples clamp to the nearest valid coordinate.
    pub fn upsample_bilinear(&self, factor: usize) -> DepthMap {
        let oh = self.height * factor;
        let ow = self.width * factor;
        let mut data = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5)
                    .clamp(0.0, (self.width - 1) as f64);
                let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5)
                    .clamp(0.0, (self.height - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let wx = sx - x0 as f64;
                let wy = sy - y0 as f64;
                data[oy * ow + ox] = (1.0 - wy)
                    * ((1.0 - wx) * self.at(y0, x0) + wx * self.at(y0, x1))
                    + wy * ((1.0 - wx) * self.at(y1, x0) + wx * self.at(y1, x1));
            }
        }
        DepthMap {
            height: oh,
            width: ow,
            data,
        }
    }

    /// Writes the `DMAP` format: one ASCII header line `DMAP H W scale`,
    /// then row-major little-endian `f32` samples (`depth = stored · scale`).
    pub fn write_dmap(&self, path: &Path) -> Result<(), CameraError> {
        let mut bytes = format!("DMAP {} {} 1\n", self.height, self.width).into_bytes();
        for &d in &self.data {
            bytes.extend_from_slice(&(d as f32).to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_dmap(path: &Path) -> Result<DepthMap, CameraError> {
        let bytes = std::fs::read(path)?;
        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CameraError::Format {
                path: path.display().to_string(),
                detail: "missing header line".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| CameraError::Format {
            path: path.display().to_string(),
            detail: "header is not ASCII".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "DMAP" {
            return Err(CameraError::Format {
                path: path.display().to_string(),
                detail: format!("expected `DMAP H W scale`, got {header:?}"),
            });
        }
        let height: usize = parts[1].parse().map_err(|_| CameraError::Format {
            path: path.display().to_string(),
            detail: "bad height".into(),
        })?;
        let width: usize = parts[2].parse().map_err(|_| CameraError::Format {
            path: path.display().to_string(),
            detail: "bad width".into(),
        })?;
        let scale: f64 = parts[3].parse().map_err(|_| CameraError::Format {
            path: path.display().to_string(),
            detail: "bad scale".into(),
        })?;
        let body = &bytes[header_end + 1..];
        if body.len() != height * width * 4 {
            return Err(CameraError::Format {
                path: path.display().to_string(),
                detail: format!(
                    "expected {} bytes of samples, found {}",
                    height * width * 4,
                    body.len()
                ),
            });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 * scale)
            .collect();
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        PixelMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn and(&self, other: &PixelMask) -> PixelMask {
        assert_eq!(self.data.len(), other.data.len());
        PixelMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

// ── Continuous depth lookup ─────────────────────────────────────────────

/// Depth of a view at a continuous pixel coordinate.
///
/// Grid-backed lookups use nearest-neighbor sampling (depth maps are
/// non-smooth at occlusion edges, interpolating would blend across the
/// boundary). Synthetic scenes provide exact analytic lookups.
pub trait DepthField {
    fn depth_at(&self, x: f64, y: f64) -> Option<f64>;
}

pub struct NearestDepth<'a>(pub &'a DepthMap);

impl DepthField for NearestDepth<'_> {
    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        let xi = x.round();
        let yi = y.round();
        if xi < 0.0 || yi < 0.0 || xi >= self.0.width as f64 || yi >= self.0.height as f64 {
            return None;
        }
        let d = self.0.at(yi as usize, xi as usize);
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// Nearest-neighbor lookup into a finer map: stage-resolution coordinates
/// are mapped to the map's resolution with pixel centers aligned
/// (`scale` = stage width / map width).
pub struct ScaledNearestDepth<'a> {
    pub map: &'a DepthMap,
    pub scale: f64,
}

impl DepthField for ScaledNearestDepth<'_> {
    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        let fx = (x + 0.5) / self.scale - 0.5;
        let fy = (y + 0.5) / self.scale - 0.5;
        NearestDepth(self.map).depth_at(fx, fy)
    }
}

// ── Differentiable warps and reprojection errors ────────────────────────

/// Warps `src_feature` (`[H, W, C]`) into the reference view through a
/// plane homography: output pixel `p` samples the source at `H·p`.
/// Differentiable with respect to the features; out-of-bounds samples are
/// zero with the returned mask cleared.
pub fn warp_grid(
    tape: &mut Tape,
    src_feature: Var,
    homography: &Matrix3<f64>,
) -> TapeResult<(Var, Vec<bool>)> {
    let shape = tape.shape(src_feature).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut coords = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let p = apply_homography(homography, [x as f64, y as f64]);
            coords.push(p[0]);
            coords.push(p[1]);
        }
    }
    let coords = tape.constant(ValueGrid::from_vec(&[h * w, 2], coords).expect("sized"));
    let sampled = tape.bilinear_sample(src_feature, coords)?;
    let mask = tape.sample_mask(sampled);
    let out = tape.reshape(sampled, &[h, w, c])?;
    Ok((out, mask))
}

/// Outputs of [`reprojection_errors`], all at the reference resolution.
pub struct ReprojectionErrors {
    /// Pixel distance between each pixel and its forward-backward
    /// reprojection, flattened `[H·W]`.
    pub xi_p: Var,
    /// Relative depth inconsistency, flattened `[H·W]`.
    pub xi_d: Var,
    /// False where any hop left the image or found no depth.
    pub validity: PixelMask,
}

/// Forward-backward reprojection errors of the reference depth `d0`
/// (`[H, W]`, may carry gradients) against a source view.
///
/// Per pixel: project into the source with `d0`, look up the source depth at
/// the landing point, back-project that to 3D, reproject into the reference
/// as `p''`. `xi_p` is the Euclidean pixel error `‖p − p''‖`; `xi_d` is
/// `|d0(p'') − d0(p)| / d0(p)` with `d0(p'')` sampled bilinearly so the
/// error stays differentiable. The looked-up source depth enters the record
/// as a constant.
pub fn reprojection_errors(
    tape: &mut Tape,
    d0: Var,
    src_depth: &dyn DepthField,
    ref_cam: &ViewCamera,
    src_cam: &ViewCamera,
) -> Result<ReprojectionErrors, CameraError> {
    let shape = tape.shape(d0).to_vec();
    assert_eq!(shape.len(), 2, "reference depth must be [H, W]");
    let (h, w) = (shape[0], shape[1]);
    let n = h * w;

    let kinv_ref = ref_cam.intrinsics.try_inverse().expect("invertible");
    let kinv_src = src_cam.intrinsics.try_inverse().expect("invertible");
    let (m_rs, t_rs) = ref_cam.relative_to(src_cam);
    let (m_sr, t_sr) = src_cam.relative_to(ref_cam);

    // Per-pixel ray directions in the reference camera, combined with the
    // relative rotation: src_point = dir·d0 + t_rs, with dir = M·K⁻¹·p̃.
    let mut dir = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut pix_u = vec![0.0; n];
    let mut pix_v = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ray = kinv_ref * Vector3::new(x as f64, y as f64, 1.0);
            let d = m_rs * ray;
            dir[0][i] = d.x;
            dir[1][i] = d.y;
            dir[2][i] = d.z;
            pix_u[i] = x as f64;
            pix_v[i] = y as f64;
        }
    }

    let d0_flat = tape.reshape(d0, &[n])?;
    let cg = |tape: &mut Tape, v: Vec<f64>| {
        tape.constant(ValueGrid::from_vec(&[n], v).expect("sized"))
    };
    let dir_x = cg(tape, dir[0].clone());
    let dir_y = cg(tape, dir[1].clone());
    let dir_z = cg(tape, dir[2].clone());
    let u = cg(tape, pix_u);
    let v = cg(tape, pix_v);

    // Source-frame point of each reference pixel.
    let qx = {
        let p = tape.mul(dir_x, d0_flat)?;
        tape.add_scalar(p, t_rs.x)
    };
    let qy = {
        let p = tape.mul(dir_y, d0_flat)?;
        tape.add_scalar(p, t_rs.y)
    };
    let qz = {
        let p = tape.mul(dir_z, d0_flat)?;
        tape.add_scalar(p, t_rs.z)
    };

    // Pixel in the source view.
    let k = &src_cam.intrinsics;
    let hx = {
        let a = tape.scale(qx, k[(0, 0)]);
        let b = tape.scale(qy, k[(0, 1)]);
        let c = tape.scale(qz, k[(0, 2)]);
        let ab = tape.add(a, b)?;
        tape.add(ab, c)?
    };
    let hy = {
        let b = tape.scale(qy, k[(1, 1)]);
        let c = tape.scale(qz, k[(1, 2)]);
        tape.add(b, c)?
    };
    let px = tape.div(hx, qz)?;
    let py = tape.div(hy, qz)?;

    // Look up the source depth at the landing points (host side, constant).
    let mut d_src = vec![1.0; n];
    let mut valid = vec![true; n];
    {
        let qz_v = tape.value(qz).data();
        let px_v = tape.value(px).data();
        let py_v = tape.value(py).data();
        for i in 0..n {
            if qz_v[i] <= 0.0 {
                valid[i] = false;
                continue;
            }
            match src_depth.depth_at(px_v[i], py_v[i]) {
                Some(ds) => d_src[i] = ds,
                None => valid[i] = false,
            }
        }
    }
    let d_src = cg(tape, d_src);

    // Back-project the source pixel at the looked-up depth, then map the
    // point into the reference frame: w = M'·(K_src⁻¹·p̃_src·d_src) + t'.
    let rpx = {
        let a = tape.scale(px, kinv_src[(0, 0)]);
        let b = tape.scale(py, kinv_src[(0, 1)]);
        let ab = tape.add(a, b)?;
        tape.add_scalar(ab, kinv_src[(0, 2)])
    };
    let rpy = {
        let b = tape.scale(py, kinv_src[(1, 1)]);
        tape.add_scalar(b, kinv_src[(1, 2)])
    };
    let sx = tape.mul(rpx, d_src)?;
    let sy = tape.mul(rpy, d_src)?;
    let sz = d_src;
    let wx = {
        let a = tape.scale(sx, m_sr[(0, 0)]);
        let b = tape.scale(sy, m_sr[(0, 1)]);
        let c = tape.scale(sz, m_sr[(0, 2)]);
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        tape.add_scalar(abc, t_sr.x)
    };
    let wy = {
        let a = tape.scale(sx, m_sr[(1, 0)]);
        let b = tape.scale(sy, m_sr[(1, 1)]);
        let c = tape.scale(sz, m_sr[(1, 2)]);
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        tape.add_scalar(abc, t_sr.y)
    };
    let wz = {
        let a = tape.scale(sx, m_sr[(2, 0)]);
        let b = tape.scale(sy, m_sr[(2, 1)]);
        let c = tape.scale(sz, m_sr[(2, 2)]);
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        tape.add_scalar(abc, t_sr.z)
    };

    let kr = &ref_cam.intrinsics;
    let hx2 = {
        let a = tape.scale(wx, kr[(0, 0)]);
        let b = tape.scale(wy, kr[(0, 1)]);
        let c = tape.scale(wz, kr[(0, 2)]);
        let ab = tape.add(a, b)?;
        tape.add(ab, c)?
    };
    let hy2 = {
        let b = tape.scale(wy, kr[(1, 1)]);
        let c = tape.scale(wz, kr[(1, 2)]);
        tape.add(b, c)?
    };
    let ppx = tape.div(hx2, wz)?;
    let ppy = tape.div(hy2, wz)?;

    {
        let wz_v = tape.value(wz).data();
        for i in 0..n {
            if wz_v[i] <= 0.0 {
                valid[i] = false;
            }
        }
    }

    // ξ_p = ‖p − p''‖₂. The floor inside the root smooths the norm's kink
    // at zero error (gradients fade below ~1e-8 px) and keeps consistent
    // depths measurably at zero.
    let dx = tape.sub(u, ppx)?;
    let dy = tape.sub(v, ppy)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let d2 = tape.add(dx2, dy2)?;
    let d2 = tape.add_scalar(d2, 1e-16);
    let xi_p = tape.sqrt(d2);

    // ξ_d = |d0(p'') − d0(p)| / d0(p), with d0 sampled bilinearly at p''.
    let d0_img = tape.reshape(d0_flat, &[h, w, 1])?;
    let ppx_col = tape.reshape(ppx, &[n, 1])?;
    let ppy_col = tape.reshape(ppy, &[n, 1])?;
    let pp = tape.concat(ppx_col, ppy_col, 1)?;
    let d0_at_pp = tape.bilinear_sample(d0_img, pp)?;
    let sample_ok = tape.sample_mask(d0_at_pp);
    for i in 0..n {
        if !sample_ok[i] {
            valid[i] = false;
        }
    }
    let d0_at_pp = tape.reshape(d0_at_pp, &[n])?;
    let diff = tape.sub(d0_at_pp, d0_flat)?;
    let num = tape.abs(diff);
    let xi_d = tape.div(num, d0_flat)?;

    Ok(ReprojectionErrors {
        xi_p,
        xi_d,
        validity: PixelMask {
            height: h,
            width: w,
            data: valid,
        },
    })
}

/// Value-only reprojection errors (scratch tape), for filtering and tests.
pub fn reprojection_errors_host(
    d0: &DepthMap,
    src_depth: &dyn DepthField,
    ref_cam: &ViewCamera,
    src_cam: &ViewCamera,
) -> Result<(ValueGrid, ValueGrid, PixelMask), CameraError> {
    let mut tape = Tape::new();
    let d0_var = tape.constant(d0.to_grid());
    let errs = reprojection_errors(&mut tape, d0_var, src_depth, ref_cam, src_cam)?;
    Ok((
        tape.value(errs.xi_p).clone(),
        tape.value(errs.xi_d).clone(),
        errs.validity,
    ))
}

// ── Camera text format ──────────────────────────────────────────────────

/// Writes the camera text format: an `extrinsic` block (4×4 row-major
/// world→camera transform), an `intrinsic` block (3×3 row-major), and a
/// `depth_range` line with `d_min d_max`.
pub fn write_camera_file(cam: &ViewCamera, path: &Path) -> Result<(), CameraError> {
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
    let mut out = String::from("extrinsic\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", t[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push_str("intrinsic\n");
    for r in 0..3 {
        let row: Vec<String> = (0..3)
            .map(|c| format!("{:.17e}", cam.intrinsics[(r, c)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push_str("depth_range\n");
    out.push_str(&format!(
        "{:.17e} {:.17e}\n",
        cam.depth_range.0, cam.depth_range.1
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_camera_file(path: &Path) -> Result<ViewCamera, CameraError> {
    let text = std::fs::read_to_string(path)?;
    let fail = |detail: &str| CameraError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut tokens: Vec<&str> = Vec::new();
    for line in text.lines() {
        tokens.extend(line.split_whitespace());
    }
    let mut pos = 0usize;
    let expect_tag = |tokens: &[&str], pos: &mut usize, tag: &str| -> Result<(), CameraError> {
        if tokens.get(*pos) != Some(&tag) {
            return Err(fail(&format!("expected {tag:?} section")));
        }
        *pos += 1;
        Ok(())
    };
    let mut read_floats = |count: usize, pos: &mut usize| -> Result<Vec<f64>, CameraError> {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let tok = tokens.get(*pos).ok_or_else(|| fail("unexpected end of file"))?;
            vals.push(
                tok.parse::<f64>()
                    .map_err(|_| fail(&format!("bad number {tok:?}")))?,
            );
            *pos += 1;
        }
        Ok(vals)
    };
    expect_tag(&tokens, &mut pos, "extrinsic")?;
    let t_vals = read_floats(16, &mut pos)?;
    expect_tag(&tokens, &mut pos, "intrinsic")?;
    let k_vals = read_floats(9, &mut pos)?;
    expect_tag(&tokens, &mut pos, "depth_range")?;
    let range = read_floats(2, &mut pos)?;

    let rotation = Matrix3::from_row_slice(&[
        t_vals[0], t_vals[1], t_vals[2], t_vals[4], t_vals[5], t_vals[6], t_vals[8], t_vals[9],
        t_vals[10],
    ]);
    let translation = Vector3::new(t_vals[3], t_vals[7], t_vals[11]);
    let intrinsics = Matrix3::from_row_slice(&k_vals);
    ViewCamera::new(intrinsics, rotation, translation, (range[0], range[1]))
}
