//! Supervision: per-stage cross-entropy on the probability volume, the
//! geometric multi-view consistency loss, and their weighted combination.

use crate::camera::{reprojection_errors, CameraError, DepthField, PixelMask, ViewCamera};
use crate::cost_volume::DepthHypotheses;
use crate::tape::{Tape, TapeResult, Var};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no valid pixels for the cross-entropy loss")]
    EmptyValidMask,
    #[error("geometric loss needs at least one source view")]
    NoSources,
    #[error("loss configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Which pixel set the geometric loss sums over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoSetMode {
    /// Valid pixels whose reprojection errors stay below the stage
    /// thresholds — gross outliers and occlusions are excluded.
    Intersection,
    /// Every valid pixel (the threshold test is vacuous in this mode).
    LiteralUnion,
}

impl GeoSetMode {
    pub fn parse(s: &str) -> Option<GeoSetMode> {
        match s {
            "intersection" => Some(GeoSetMode::Intersection),
            "union" => Some(GeoSetMode::LiteralUnion),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GeoSetMode::Intersection => "intersection",
            GeoSetMode::LiteralUnion => "union",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Combination coefficient for the relative depth error inside the
    /// sigmoid.
    pub gamma: f64,
    /// Cross-entropy weight.
    pub lambda_ce: f64,
    /// Geometric-loss weight.
    pub lambda_geo: f64,
    /// Per-stage pixel-error thresholds.
    pub tau_pixel: [f64; 3],
    /// Per-stage relative-depth-error thresholds.
    pub tau_depth: [f64; 3],
    pub set_mode: GeoSetMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 100.0,
            lambda_ce: 2.0,
            lambda_geo: 1.0,
            tau_pixel: [3.0, 2.0, 1.0],
            tau_depth: [0.1, 0.05, 0.01],
            set_mode: GeoSetMode::Intersection,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let positive = self.gamma > 0.0
            && self.lambda_ce > 0.0
            && self.lambda_geo >= 0.0
            && self.tau_pixel.iter().all(|&t| t > 0.0)
            && self.tau_depth.iter().all(|&t| t > 0.0);
        if !positive {
            return Err(LossError::BadConfig("all weights and thresholds must be positive".into()));
        }
        let decreasing = self.tau_pixel.windows(2).all(|w| w[0] >= w[1])
            && self.tau_depth.windows(2).all(|w| w[0] >= w[1]);
        if !decreasing {
            return Err(LossError::BadConfig(
                "per-stage thresholds must decrease with the stage".into(),
            ));
        }
        Ok(())
    }
}

/// Cross-entropy against a one-hot target at the hypothesis bin nearest the
/// ground-truth depth: mean over valid pixels of `−log P[target]`. Pixels
/// whose ground truth falls outside the per-pixel hypothesis span are
/// dropped from the mean.
pub fn ce_loss(
    tape: &mut Tape,
    prob: Var,
    gt_depth: &crate::camera::DepthMap,
    hyps: &DepthHypotheses,
    valid: &PixelMask,
) -> Result<Var, LossError> {
    let shape = tape.shape(prob).to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(h, gt_depth.height);
    debug_assert_eq!(w, gt_depth.width);
    let mut picks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !valid.at(y, x) || !gt_depth.is_valid(y, x) {
                continue;
            }
            let gt = gt_depth.at(y, x);
            if !hyps.covers(y, x, gt) {
                continue;
            }
            let bin = hyps.nearest_bin(y, x, gt);
            picks.push((y * w + x) * d + bin);
        }
    }
    if picks.is_empty() {
        return Err(LossError::EmptyValidMask);
    }
    let n = picks.len();
    let flat = tape.reshape(prob, &[h * w * d])?;
    let picked = tape.gather(flat, Rc::new(picks), &[n])?;
    let logp = tape.ln(picked);
    let total = tape.sum_all(logp);
    Ok(tape.scale(total, -1.0 / n as f64))
}

pub struct GeoLossOutput {
    pub loss: Var,
    /// Number of pixels in the summation set.
    pub selected: usize,
    /// True when the set was empty and the loss defaulted to zero.
    pub empty: bool,
}

/// Geometric consistency loss of an estimated depth map against the source
/// views' depths: per pixel the forward-backward reprojection errors
/// (ξ_p, ξ_d) are taken from the most-consistent source view, and the loss
/// averages `sigmoid(ξ_p + γ·ξ_d)` over the selected pixel set.
pub fn geo_loss(
    tape: &mut Tape,
    d0: Var,
    src_depths: &[&dyn DepthField],
    ref_cam: &ViewCamera,
    src_cams: &[ViewCamera],
    valid_ref: &PixelMask,
    cfg: &LossConfig,
    stage: usize,
) -> Result<GeoLossOutput, LossError> {
    if src_depths.is_empty() || src_depths.len() != src_cams.len() {
        return Err(LossError::NoSources);
    }
    let shape = tape.shape(d0).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let n = h * w;
    let views = src_depths.len();

    // Per-view combined error e_v = ξ_p + γ·ξ_d, stacked as [views·n].
    let mut stacked: Option<Var> = None;
    let mut validity: Vec<PixelMask> = Vec::with_capacity(views);
    let mut xi_values: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(views);
    for (field, cam) in src_depths.iter().zip(src_cams) {
        let errs = reprojection_errors(tape, d0, *field, ref_cam, cam)?;
        let scaled = tape.scale(errs.xi_d, cfg.gamma);
        let combined = tape.add(errs.xi_p, scaled)?;
        xi_values.push((
            tape.value(errs.xi_p).data().to_vec(),
            tape.value(errs.xi_d).data().to_vec(),
        ));
        validity.push(errs.validity);
        stacked = Some(match stacked {
            Some(acc) => tape.concat(acc, combined, 0)?,
            None => combined,
        });
    }
    let stacked = stacked.expect("at least one view");

    // Most-consistent view per pixel (host selection over forward values).
    let combined_host: Vec<&[f64]> = (0..views)
        .map(|v| &tape.value(stacked).data()[v * n..(v + 1) * n])
        .collect();
    let tau_p = cfg.tau_pixel[stage];
    let tau_d = cfg.tau_depth[stage];
    let mut picks = Vec::new();
    for pix in 0..n {
        if !valid_ref.data[pix] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for v in 0..views {
            if !validity[v].data[pix] {
                continue;
            }
            let e = combined_host[v][pix];
            if best.map(|(_, b)| e < b).unwrap_or(true) {
                best = Some((v, e));
            }
        }
        let Some((v, _)) = best else { continue };
        let in_set = match cfg.set_mode {
            GeoSetMode::Intersection => {
                xi_values[v].0[pix] < tau_p && xi_values[v].1[pix] < tau_d
            }
            GeoSetMode::LiteralUnion => true,
        };
        if in_set {
            picks.push(v * n + pix);
        }
    }
    if picks.is_empty() {
        let zero = tape.constant(crate::grid::ValueGrid::scalar(0.0));
        return Ok(GeoLossOutput {
            loss: zero,
            selected: 0,
            empty: true,
        });
    }
    let count = picks.len();
    let chosen = tape.gather(stacked, Rc::new(picks), &[count])?;
    let phi = tape.sigmoid(chosen);
    let total = tape.sum_all(phi);
    let loss = tape.scale(total, 1.0 / count as f64);
    Ok(GeoLossOutput {
        loss,
        selected: count,
        empty: false,
    })
}

/// Total loss over the cascade: `Σ_k λ_ce·CE_k + λ_geo·Geo_k`.
pub fn total_loss(
    tape: &mut Tape,
    ce: &[Var; 3],
    geo: &[Var; 3],
    cfg: &LossConfig,
) -> TapeResult<Var> {
    let mut acc: Option<Var> = None;
    for k in 0..3 {
        let ce_term = tape.scale(ce[k], cfg.lambda_ce);
        let geo_term = tape.scale(geo[k], cfg.lambda_geo);
        let sum = tape.add(ce_term, geo_term)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sum)?,
            None => sum,
        });
    }
    Ok(acc.expect("three stages"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{DepthMap, NearestDepth};
    use crate::cost_volume::{generate_hypotheses, HypothesisConfig};
    use crate::grid::ValueGrid;
    use crate::tape::finite_difference_check;
    use nalgebra::{Matrix3, Vector3};

    fn hyps(h: usize, w: usize, d: usize) -> DepthHypotheses {
        let cfg = HypothesisConfig {
            counts: [d, 2, 2],
            ..HypothesisConfig::default()
        };
        generate_hypotheses(0, None, (1.0, 4.0), h, w, &cfg).unwrap()
    }

    fn cam(t: Vector3<f64>) -> ViewCamera {
        let k = Matrix3::new(50.0, 0.0, 20.0, 0.0, 50.0, 15.0, 0.0, 0.0, 1.0);
        ViewCamera::new(k, Matrix3::identity(), t, (1.0, 4.0)).unwrap()
    }

    struct ConstDepth(f64);
    impl DepthField for ConstDepth {
        fn depth_at(&self, _x: f64, _y: f64) -> Option<f64> {
            Some(self.0)
        }
    }

    #[test]
    fn one_hot_probability_gives_zero_loss() {
        let (h, w, d) = (3, 4, 8);
        let hy = hyps(h, w, d);
        let gt = DepthMap::filled(h, w, hy.at(0, 0, 3));
        let mut prob = ValueGrid::zeros(&[h, w, d]);
        for y in 0..h {
            for x in 0..w {
                prob.set(&[y, x, 3], 1.0);
            }
        }
        let mut tape = Tape::new();
        let p = tape.input(prob, false);
        let valid = PixelMask::filled(h, w, true);
        let loss = ce_loss(&mut tape, p, &gt, &hy, &valid).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn uniform_probability_is_ln_d() {
        for d in [8usize, 32, 48] {
            let (h, w) = (2, 2);
            let hy = hyps(h, w, d);
            let gt = DepthMap::filled(h, w, 2.0);
            let prob = ValueGrid::filled(&[h, w, d], 1.0 / d as f64);
            let mut tape = Tape::new();
            let p = tape.input(prob, false);
            let valid = PixelMask::filled(h, w, true);
            let loss = ce_loss(&mut tape, p, &gt, &hy, &valid).unwrap();
            let expected = (d as f64).ln();
            assert!(
                (tape.value(loss).data()[0] - expected).abs() < 1e-12,
                "D = {d}"
            );
        }
    }

    #[test]
    fn out_of_range_gt_pixels_are_dropped() {
        let (h, w, d) = (1, 2, 4);
        let hy = hyps(h, w, d);
        let mut gt = DepthMap::filled(h, w, 2.0);
        gt.set(0, 1, 9.0); // outside [1, 4]
        let prob = ValueGrid::filled(&[h, w, d], 0.25);
        let mut tape = Tape::new();
        let p = tape.input(prob, false);
        let valid = PixelMask::filled(h, w, true);
        let loss = ce_loss(&mut tape, p, &gt, &hy, &valid).unwrap();
        // Only pixel (0,0) contributes.
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_valid_mask_is_an_error() {
        let (h, w, d) = (2, 2, 4);
        let hy = hyps(h, w, d);
        let gt = DepthMap::filled(h, w, 2.0);
        let prob = ValueGrid::filled(&[h, w, d], 0.25);
        let mut tape = Tape::new();
        let p = tape.input(prob, false);
        let valid = PixelMask::filled(h, w, false);
        assert!(matches!(
            ce_loss(&mut tape, p, &gt, &hy, &valid),
            Err(LossError::EmptyValidMask)
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let (h, w, d) = (3, 3, 6);
        let hy = hyps(h, w, d);
        let gt = DepthMap::filled(h, w, 2.1);
        // Positive normalized rows (softmax of a smooth pattern).
        let mut logits = ValueGrid::from_fn(&[h, w, d], |i| {
            ((i[0] * 3 + i[1] * 5 + i[2]) as f64 * 0.43).sin()
        });
        for px in 0..h * w {
            let row = &mut logits.data_mut()[px * d..(px + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let valid = PixelMask::filled(h, w, true);
        let report = finite_difference_check(
            |tape, vars| {
                ce_loss(tape, vars[0], &gt, &hy, &valid).map_err(|e| match e {
                    LossError::Tape(t) => t,
                    other => panic!("unexpected: {other}"),
                })
            },
            &[logits],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn consistent_depth_scores_one_half_with_flat_numeric_gradient() {
        // Ground-truth depth and exact cameras: every error is ~0, the loss
        // is sigmoid(0) = 0.5, and the symmetric difference around the
        // optimum vanishes.
        let (h, w) = (6, 8);
        let refc = cam(Vector3::zeros());
        let srcc = cam(Vector3::new(-0.3, 0.0, 0.0));
        let cfg = LossConfig::default();
        let valid = PixelMask::filled(h, w, true);
        let eval = |depth: f64| -> f64 {
            let mut tape = Tape::new();
            let d0 = tape.constant(ValueGrid::filled(&[h, w], depth));
            let out = geo_loss(
                &mut tape,
                d0,
                &[&ConstDepth(2.0)],
                &refc,
                &[srcc.clone()],
                &valid,
                &cfg,
                0,
            )
            .unwrap();
            assert!(!out.empty);
            tape.value(out.loss).data()[0]
        };
        let at_gt = eval(2.0);
        // ξ_p carries the 1e-8 px smoothing floor, so the loss sits within
        // a few 1e-9 of sigmoid(0).
        assert!((at_gt - 0.5).abs() < 1e-7);
        let h_step = 1e-5;
        let numeric = (eval(2.0 + h_step) - eval(2.0 - h_step)) / (2.0 * h_step);
        assert!(numeric.abs() < 1e-3, "numeric gradient {numeric}");
    }

    #[test]
    fn pixels_beyond_tau_are_excluded() {
        let (h, w) = (6, 40);
        let refc = cam(Vector3::zeros());
        let srcc = cam(Vector3::new(-0.3, 0.0, 0.0));
        let cfg = LossConfig::default();
        let valid = PixelMask::filled(h, w, true);
        // One pixel with a large depth error: ξ_p = f·b·(1/2 − 1/3.8) ≈ 3.55
        // px at stage 0 (τ₁ = 3), so it must drop out of the selected set.
        let mut d0 = DepthMap::filled(h, w, 2.0);
        d0.set(3, 20, 3.8);
        let mut tape = Tape::new();
        let v = tape.constant(d0.to_grid());
        let out = geo_loss(
            &mut tape,
            v,
            &[&ConstDepth(2.0)],
            &refc,
            &[srcc.clone()],
            &valid,
            &cfg,
            0,
        )
        .unwrap();
        // The analytic source field is unbounded, so every pixel stays
        // valid; only the τ-excluded pixel drops out.
        assert_eq!(out.selected, h * w - 1);

        // Union mode keeps it.
        let cfg_union = LossConfig {
            set_mode: GeoSetMode::LiteralUnion,
            ..LossConfig::default()
        };
        let out_union = geo_loss(
            &mut tape,
            v,
            &[&ConstDepth(2.0)],
            &refc,
            &[srcc],
            &valid,
            &cfg_union,
            0,
        )
        .unwrap();
        assert_eq!(out_union.selected, h * w);
    }

    #[test]
    fn geo_gradient_matches_finite_differences() {
        let (h, w) = (4, 4);
        let refc = cam(Vector3::zeros());
        let srcc = cam(Vector3::new(-0.3, 0.1, 0.0));
        let cfg = LossConfig::default();
        let valid = PixelMask::filled(h, w, true);
        // Mild perturbations keep every pixel away from thresholds and
        // sampling-cell boundaries.
        let d0 = ValueGrid::from_fn(&[h, w], |i| 2.0 + 0.013 * ((i[0] * 4 + i[1]) as f64).sin());
        let report = finite_difference_check(
            |tape, vars| {
                let out = geo_loss(
                    tape,
                    vars[0],
                    &[&ConstDepth(2.0)],
                    &refc,
                    &[srcc.clone()],
                    &valid,
                    &cfg,
                    0,
                )
                .map_err(|e| match e {
                    LossError::Tape(t) => t,
                    other => panic!("unexpected: {other}"),
                })?;
                Ok(out.loss)
            },
            &[d0],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn scene_rescaling_leaves_errors_invariant() {
        // Scaling depths, translations and source depths by a power of two
        // leaves ξ_d bit-exact and ξ_p bit-exact (pixels are unchanged).
        let (h, w) = (5, 6);
        let refc = cam(Vector3::zeros());
        let srcc = cam(Vector3::new(-0.3, 0.05, 0.0));
        let d0 = ValueGrid::from_fn(&[h, w], |i| 2.0 + 0.05 * ((i[0] + i[1]) as f64).cos());

        let run = |scale: f64| {
            let srcc_scaled = ViewCamera::new(
                srcc.intrinsics,
                srcc.rotation,
                srcc.translation * scale,
                (srcc.depth_range.0 * scale, srcc.depth_range.1 * scale),
            )
            .unwrap();
            let refc_scaled = ViewCamera::new(
                refc.intrinsics,
                refc.rotation,
                refc.translation * scale,
                (refc.depth_range.0 * scale, refc.depth_range.1 * scale),
            )
            .unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(d0.map(|x| x * scale));
            let errs = reprojection_errors(
                &mut tape,
                v,
                &ConstDepth(2.0 * scale),
                &refc_scaled,
                &srcc_scaled,
            )
            .unwrap();
            (
                tape.value(errs.xi_p).data().to_vec(),
                tape.value(errs.xi_d).data().to_vec(),
                errs.validity,
            )
        };
        let (p1, d1, v1) = run(1.0);
        let (p2, d2, v2) = run(2.0);
        assert_eq!(v1.data, v2.data);
        for i in 0..h * w {
            if v1.data[i] {
                assert_eq!(d1[i].to_bits(), d2[i].to_bits(), "xi_d at {i}");
                assert_eq!(p1[i].to_bits(), p2[i].to_bits(), "xi_p at {i}");
            }
        }
        let (p3, d3, v3) = run(3.0);
        for i in 0..h * w {
            if v1.data[i] && v3.data[i] {
                assert!((d1[i] - d3[i]).abs() < 1e-12);
                assert!((p1[i] - p3[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn total_loss_combines_stages() {
        let cfg = LossConfig::default();
        cfg.validate().unwrap();
        let mut tape = Tape::new();
        let one = tape.constant(ValueGrid::scalar(1.0));
        let zero = tape.constant(ValueGrid::scalar(0.0));
        let total = total_loss(&mut tape, &[one, one, one], &[zero, zero, zero], &cfg).unwrap();
        assert_eq!(tape.value(total).data()[0], 6.0);

        let cfg_no_geo = LossConfig {
            lambda_geo: 0.0,
            ..LossConfig::default()
        };
        let half = tape.constant(ValueGrid::scalar(0.5));
        let total2 =
            total_loss(&mut tape, &[one, one, one], &[half, half, half], &cfg_no_geo).unwrap();
        assert_eq!(tape.value(total2).data()[0], 6.0);
    }

    #[test]
    fn nearest_depth_lookup_rounds_and_rejects() {
        let mut grid = DepthMap::filled(2, 3, 1.5);
        grid.set(1, 2, 0.0); // invalid
        let f = NearestDepth(&grid);
        assert_eq!(f.depth_at(0.4, 0.4), Some(1.5));
        assert_eq!(f.depth_at(2.0, 1.0), None); // hits the invalid cell
        assert_eq!(f.depth_at(-1.0, 0.0), None);
        assert_eq!(f.depth_at(0.0, 1.6), None); // rounds to y=2, outside
    }
}
