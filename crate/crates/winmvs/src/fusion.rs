//! Multi-view consistency filtering, depth-map fusion into point clouds,
//! and reconstruction metrics (accuracy / completeness / overall plus
//! precision / recall / F-score at a distance threshold).

use crate::camera::{
    reprojection_errors_host, CameraError, DepthMap, NearestDepth, PixelMask, ViewCamera,
};
use crate::grid::ValueGrid;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("view counts differ: {0} depth maps, {1} cameras")]
    ViewMismatch(usize, usize),
    #[error("ply file {path}: {detail}")]
    Ply { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Fused 3D points, with the view each point came from.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub sources: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with x y z vertex properties.
    pub fn write_ply(&self, path: &Path) -> Result<(), FusionError> {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        out.push_str(&format!("element vertex {}\n", self.points.len()));
        out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
        for p in &self.points {
            out.push_str(&format!("{:.9} {:.9} {:.9}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads an ASCII PLY; `nx ny nz` and other extra properties are
    /// tolerated and ignored.
    pub fn read_ply(path: &Path) -> Result<PointCloud, FusionError> {
        let text = std::fs::read_to_string(path)?;
        let fail = |detail: &str| FusionError::Ply {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(fail("missing ply magic"));
        }
        let mut vertex_count = 0usize;
        let mut properties: Vec<String> = Vec::new();
        let mut in_vertex_element = false;
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["format", "ascii", _] | ["comment", ..] => {}
                ["element", "vertex", n] => {
                    vertex_count = n.parse().map_err(|_| fail("bad vertex count"))?;
                    in_vertex_element = true;
                }
                ["element", ..] => in_vertex_element = false,
                ["property", _, name] if in_vertex_element => {
                    properties.push((*name).to_string());
                }
                ["property", ..] => {}
                ["format", ..] => return Err(fail("only ascii ply is supported")),
                _ => return Err(fail(&format!("unrecognized header line {line:?}"))),
            }
        }
        let ix = properties.iter().position(|p| p == "x").ok_or_else(|| fail("no x property"))?;
        let iy = properties.iter().position(|p| p == "y").ok_or_else(|| fail("no y property"))?;
        let iz = properties.iter().position(|p| p == "z").ok_or_else(|| fail("no z property"))?;
        let mut points = Vec::with_capacity(vertex_count);
        for line in lines.take(vertex_count) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| fail("bad vertex line"))?;
            if vals.len() < properties.len() {
                return Err(fail("vertex line has too few values"));
            }
            points.push([vals[ix], vals[iy], vals[iz]]);
        }
        if points.len() != vertex_count {
            return Err(fail("fewer vertices than declared"));
        }
        let sources = vec![0; points.len()];
        Ok(PointCloud { points, sources })
    }
}

/// Consistency-filter thresholds.
#[derive(Clone, Copy, Debug)]
pub struct FilterThresholds {
    /// Maximum forward-backward pixel error.
    pub pixel: f64,
    /// Maximum relative depth error.
    pub depth: f64,
    /// A pixel survives when at least this many source views agree.
    pub min_consistent: usize,
    /// Minimum estimator confidence.
    pub min_confidence: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            pixel: 1.0,
            depth: 0.01,
            min_consistent: 2,
            min_confidence: 0.3,
        }
    }
}

/// Per-pair geometric agreement masks: `pairwise[r][v]` marks the pixels of
/// view `r` whose depth is consistent with view `v`'s estimated depth.
fn pairwise_consistency(
    depths: &[DepthMap],
    cams: &[ViewCamera],
    thresholds: &FilterThresholds,
) -> Result<Vec<Vec<PixelMask>>, FusionError> {
    let views = depths.len();
    let mut out = Vec::with_capacity(views);
    for r in 0..views {
        let mut row = Vec::with_capacity(views);
        for v in 0..views {
            if v == r {
                row.push(PixelMask::filled(depths[r].height, depths[r].width, false));
                continue;
            }
            let (xi_p, xi_d, validity) = reprojection_errors_host(
                &depths[r],
                &NearestDepth(&depths[v]),
                &cams[r],
                &cams[v],
            )?;
            let mut mask = PixelMask::filled(depths[r].height, depths[r].width, false);
            for i in 0..mask.data.len() {
                mask.data[i] = validity.data[i]
                    && xi_p.data()[i] < thresholds.pixel
                    && xi_d.data()[i] < thresholds.depth;
            }
            row.push(mask);
        }
        out.push(row);
    }
    Ok(out)
}

/// A pixel survives when its confidence clears the floor and enough source
/// views are geometrically consistent with it (estimated depths on both
/// sides, nearest-neighbor source lookup).
pub fn consistency_filter(
    depths: &[DepthMap],
    confidences: &[ValueGrid],
    cams: &[ViewCamera],
    thresholds: &FilterThresholds,
) -> Result<Vec<PixelMask>, FusionError> {
    if depths.len() != cams.len() {
        return Err(FusionError::ViewMismatch(depths.len(), cams.len()));
    }
    let pairwise = pairwise_consistency(depths, cams, thresholds)?;
    let views = depths.len();
    let mut out = Vec::with_capacity(views);
    for r in 0..views {
        let mut mask = PixelMask::filled(depths[r].height, depths[r].width, false);
        for i in 0..mask.data.len() {
            if !depths[r].data[i].is_finite() || depths[r].data[i] <= 0.0 {
                continue;
            }
            if confidences[r].data()[i] < thresholds.min_confidence {
                continue;
            }
            let consistent = (0..views)
                .filter(|&v| v != r && pairwise[r][v].data[i])
                .count();
            mask.data[i] = consistent >= thresholds.min_consistent;
        }
        out.push(mask);
    }
    Ok(out)
}

/// Back-projects every surviving pixel and averages it with the 3D points
/// of the source views that agreed with it. View and pixel order is fixed,
/// so the output is deterministic.
pub fn fuse(
    depths: &[DepthMap],
    masks: &[PixelMask],
    cams: &[ViewCamera],
    thresholds: &FilterThresholds,
) -> Result<PointCloud, FusionError> {
    if depths.len() != cams.len() {
        return Err(FusionError::ViewMismatch(depths.len(), cams.len()));
    }
    let pairwise = pairwise_consistency(depths, cams, thresholds)?;
    let mut cloud = PointCloud::default();
    for r in 0..depths.len() {
        let (h, w) = (depths[r].height, depths[r].width);
        for y in 0..h {
            for x in 0..w {
                if !masks[r].at(y, x) {
                    continue;
                }
                let d = depths[r].at(y, x);
                let base = cams[r].backproject([x as f64, y as f64], d)?;
                let mut acc = base;
                let mut count = 1.0;
                for v in 0..depths.len() {
                    if v == r || !pairwise[r][v].at(y, x) {
                        continue;
                    }
                    // Corresponding source pixel and its own 3D point.
                    let Ok((pix, _)) = cams[v].project(&base) else {
                        continue;
                    };
                    let sx = pix[0].round();
                    let sy = pix[1].round();
                    if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                        continue;
                    }
                    let dv = depths[v].at(sy as usize, sx as usize);
                    if dv <= 0.0 || !dv.is_finite() {
                        continue;
                    }
                    let xv = cams[v].backproject([sx, sy], dv)?;
                    acc += xv;
                    count += 1.0;
                }
                cloud.points.push([acc.x / count, acc.y / count, acc.z / count]);
                cloud.sources.push(r as u32);
            }
        }
    }
    Ok(cloud)
}

// ── Nearest-neighbor index ──────────────────────────────────────────────

/// Static 3D k-d tree over points, median-split, for nearest-neighbor
/// distance queries.
pub struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        let mut pts = points.to_vec();
        if !pts.is_empty() {
            Self::split(&mut pts, 0);
        }
        KdTree { points: pts }
    }

    fn split(pts: &mut [[f64; 3]], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| {
            a[axis].partial_cmp(&b[axis]).expect("finite coordinates")
        });
        let (lo, rest) = pts.split_at_mut(mid);
        Self::split(lo, depth + 1);
        Self::split(&mut rest[1..], depth + 1);
    }

    /// Distance from `query` to the nearest stored point.
    pub fn nearest_distance(&self, query: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        if !self.points.is_empty() {
            self.search(&self.points, 0, query, &mut best);
        }
        best.sqrt()
    }

    fn search(&self, pts: &[[f64; 3]], depth: usize, query: &[f64; 3], best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        let p = &pts[mid];
        let d2 = (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2);
        if d2 < *best {
            *best = d2;
        }
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (&pts[..mid], &pts[mid + 1..])
        } else {
            (&pts[mid + 1..], &pts[..mid])
        };
        let near_depth = depth + 1;
        self.search(near, near_depth, query, best);
        if delta * delta < *best {
            self.search(far, near_depth, query, best);
        }
    }
}

/// Reconstruction quality report.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricReport {
    /// Mean distance from reconstruction points to the ground truth.
    pub accuracy: f64,
    /// Mean distance from ground-truth points to the reconstruction.
    pub completeness: f64,
    /// Mean of accuracy and completeness.
    pub overall: f64,
    /// Fraction of reconstruction points within `tau` of the ground truth.
    pub precision: f64,
    /// Fraction of ground-truth points within `tau` of the reconstruction.
    pub recall: f64,
    /// Harmonic mean of precision and recall, in percent.
    pub f_score: f64,
    pub tau: f64,
    /// Distances above this cap are excluded from the means.
    pub outlier_cap: f64,
}

impl MetricReport {
    /// Flat `key=value` text form.
    pub fn to_key_values(&self) -> String {
        format!(
            "accuracy={:.9}\ncompleteness={:.9}\noverall={:.9}\nprecision={:.9}\nrecall={:.9}\nf_score={:.9}\ntau={:.9}\noutlier_cap={}\n",
            self.accuracy,
            self.completeness,
            self.overall,
            self.precision,
            self.recall,
            self.f_score,
            self.tau,
            self.outlier_cap
        )
    }
}

/// Compares a reconstruction against a ground-truth cloud: mean distances
/// both ways (distances beyond `outlier_cap` excluded), the fraction of
/// points within `tau` in each direction, and their harmonic mean.
pub fn evaluate(
    recon: &PointCloud,
    gt: &PointCloud,
    tau: f64,
    outlier_cap: f64,
) -> Result<MetricReport, FusionError> {
    if recon.is_empty() || gt.is_empty() {
        return Err(FusionError::EmptyCloud);
    }
    let gt_tree = KdTree::build(&gt.points);
    let recon_tree = KdTree::build(&recon.points);
    let directional = |points: &[[f64; 3]], tree: &KdTree| -> (f64, f64) {
        let mut sum = 0.0;
        let mut kept = 0usize;
        let mut within = 0usize;
        for p in points {
            let d = tree.nearest_distance(p);
            if d <= outlier_cap {
                sum += d;
                kept += 1;
            }
            if d <= tau {
                within += 1;
            }
        }
        let mean = if kept == 0 { outlier_cap } else { sum / kept as f64 };
        (mean, within as f64 / points.len() as f64)
    };
    let (accuracy, precision) = directional(&recon.points, &gt_tree);
    let (completeness, recall) = directional(&gt.points, &recon_tree);
    let f_score = if precision + recall > 0.0 {
        200.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
        precision,
        recall,
        f_score,
        tau,
        outlier_cap,
    })
}
