//! Cascade depth hypotheses, grouped-correlation plane-sweep cost volumes
//! and probability-volume depth readout.

use crate::camera::{DepthMap, ViewCamera};
use crate::grid::ValueGrid;
use crate::tape::{Tape, TapeResult, Var};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostVolumeError {
    #[error("stage {0} is out of range (three-stage cascade)")]
    BadStage(usize),
    #[error("stage {0} needs the previous stage's depth map")]
    MissingPrevDepth(usize),
    #[error("previous depth is {got}×{goth}, expected {want}×{wanth}")]
    PrevDepthSize {
        got: usize,
        goth: usize,
        want: usize,
        wanth: usize,
    },
    #[error("group count {groups} does not divide feature channels {channels}")]
    Groups { groups: usize, channels: usize },
    #[error("need at least one source view")]
    NoSources,
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// How the hypothesis spacing shrinks across the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Each stage's interval is `decay` × the previous stage's interval.
    Chained,
    /// Both later stages scale the stage-1 interval directly.
    FromFirst,
}

#[derive(Clone, Debug)]
pub struct HypothesisConfig {
    pub counts: [usize; 3],
    pub decay: [f64; 2],
    pub mode: DecayMode,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        HypothesisConfig {
            counts: [48, 32, 8],
            decay: [0.25, 0.5],
            mode: DecayMode::Chained,
        }
    }
}

impl HypothesisConfig {
    /// Hypothesis spacing at `stage` (0-based) for a given depth range.
    pub fn interval(&self, stage: usize, range: (f64, f64)) -> f64 {
        let base = (range.1 - range.0) / (self.counts[0] - 1) as f64;
        match stage {
            0 => base,
            1 => self.decay[0] * base,
            _ => match self.mode {
                DecayMode::Chained => self.decay[1] * self.decay[0] * base,
                DecayMode::FromFirst => self.decay[1] * base,
            },
        }
    }
}

/// Per-pixel sorted depth candidates for one stage.
#[derive(Clone, Debug)]
pub struct DepthHypotheses {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    /// `[H, W, D]`, strictly increasing along the last axis.
    pub values: ValueGrid,
}

impl DepthHypotheses {
    pub fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.values.at(&[y, x, k])
    }

    pub fn strictly_increasing(&self) -> bool {
        for y in 0..self.height {
            for x in 0..self.width {
                for k in 1..self.count {
                    if self.at(y, x, k) <= self.at(y, x, k - 1) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Index of the hypothesis nearest to `depth`; ties to the lower index.
    pub fn nearest_bin(&self, y: usize, x: usize, depth: f64) -> usize {
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for k in 0..self.count {
            let err = (self.at(y, x, k) - depth).abs();
            if err < best_err {
                best_err = err;
                best = k;
            }
        }
        best
    }

    /// True when `depth` lies inside the per-pixel hypothesis span.
    pub fn covers(&self, y: usize, x: usize, depth: f64) -> bool {
        depth >= self.at(y, x, 0) && depth <= self.at(y, x, self.count - 1)
    }
}

/// Stage-1 hypotheses sweep the whole range uniformly (endpoints included);
/// later stages center a shorter, finer window on the previous estimate,
/// sliding the window back inside the range when it would cross it (so the
/// candidates stay strictly increasing after clamping).
pub fn generate_hypotheses(
    stage: usize,
    prev_depth: Option<&DepthMap>,
    range: (f64, f64),
    height: usize,
    width: usize,
    cfg: &HypothesisConfig,
) -> Result<DepthHypotheses, CostVolumeError> {
    if stage >= 3 {
        return Err(CostVolumeError::BadStage(stage));
    }
    let count = cfg.counts[stage];
    let (dmin, dmax) = range;
    if stage == 0 {
        let step = (dmax - dmin) / (count - 1) as f64;
        let values = ValueGrid::from_fn(&[height, width, count], |i| dmin + step * i[2] as f64);
        return Ok(DepthHypotheses {
            stage,
            height,
            width,
            count,
            values,
        });
    }
    let prev = prev_depth.ok_or(CostVolumeError::MissingPrevDepth(stage))?;
    if prev.height != height || prev.width != width {
        return Err(CostVolumeError::PrevDepthSize {
            got: prev.width,
            goth: prev.height,
            want: width,
            wanth: height,
        });
    }
    let interval = cfg.interval(stage, range);
    let span = interval * (count - 1) as f64;
    let values = ValueGrid::from_fn(&[height, width, count], |i| {
        let center = {
            let d = prev.at(i[0], i[1]);
            if d.is_finite() && d > 0.0 {
                d
            } else {
                0.5 * (dmin + dmax)
            }
        };
        let mut lo = center - 0.5 * span;
        if lo < dmin {
            lo = dmin;
        }
        if lo + span > dmax {
            lo = dmax - span;
        }
        lo + interval * i[2] as f64
    });
    Ok(DepthHypotheses {
        stage,
        height,
        width,
        count,
        values,
    })
}

/// Rounds warp coordinates that sit within numerical noise of an integer
/// onto it, so degenerate warps (zero baseline, exactly aligned rigs) do not
/// flicker across the in-bounds boundary or between sampling cells.
fn snap(coord: f64) -> f64 {
    let r = coord.round();
    if (coord - r).abs() < 1e-9 {
        r
    } else {
        coord
    }
}

/// Grouped-correlation cost volume `[H, W, G, D]` on the tape.
pub struct CostVolume {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub depths: usize,
}

/// Builds the plane-sweep cost volume: every source feature map is warped to
/// the reference view at each per-pixel hypothesis, correlated group-wise
/// with the reference features, and averaged over the views with
/// out-of-bounds warps weighted to zero.
pub fn build_cost_volume(
    tape: &mut Tape,
    ref_feat: Var,
    src_feats: &[Var],
    ref_cam: &ViewCamera,
    src_cams: &[ViewCamera],
    hyps: &DepthHypotheses,
    groups: usize,
) -> Result<CostVolume, CostVolumeError> {
    if src_feats.is_empty() || src_feats.len() != src_cams.len() {
        return Err(CostVolumeError::NoSources);
    }
    let shape = tape.shape(ref_feat).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(h, hyps.height);
    debug_assert_eq!(w, hyps.width);
    if groups == 0 || c % groups != 0 {
        return Err(CostVolumeError::Groups {
            groups,
            channels: c,
        });
    }
    let d = hyps.count;
    let per_group = c / groups;

    let kinv = ref_cam.intrinsics.try_inverse().expect("invertible");

    let mut per_view: Vec<(Var, Vec<bool>)> = Vec::with_capacity(src_feats.len());
    for (feat, cam) in src_feats.iter().zip(src_cams) {
        let (m_rs, t_rs) = ref_cam.relative_to(cam);
        let k = &cam.intrinsics;
        let mut coords = Vec::with_capacity(d * h * w * 2);
        for di in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let depth = hyps.at(y, x, di);
                    let ray = kinv * Vector3::new(x as f64, y as f64, 1.0);
                    let q = m_rs * ray * depth + t_rs;
                    if q.z <= 0.0 {
                        coords.push(-1.0);
                        coords.push(-1.0);
                        continue;
                    }
                    let hx = k[(0, 0)] * q.x + k[(0, 1)] * q.y + k[(0, 2)] * q.z;
                    let hy = k[(1, 1)] * q.y + k[(1, 2)] * q.z;
                    coords.push(snap(hx / q.z));
                    coords.push(snap(hy / q.z));
                }
            }
        }
        let coords = tape.constant(ValueGrid::from_vec(&[d * h * w, 2], coords).expect("sized"));
        let sampled = tape.bilinear_sample(*feat, coords)?;
        let mask = tape.sample_mask(sampled);
        let warped = tape.reshape(sampled, &[d, h, w, c])?;
        let prod = tape.mul_broadcast(warped, ref_feat, &[1, h, w, c])?;
        let grouped = tape.reshape(prod, &[d, h, w, groups, per_group])?;
        let corr = tape.sum_axis(grouped, 4)?;
        let corr = tape.scale(corr, 1.0 / per_group as f64);
        per_view.push((corr, mask));
    }

    // View average with out-of-bounds samples weighted to zero.
    let n = d * h * w;
    let mut valid_count = vec![0u32; n];
    for (_, mask) in &per_view {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                valid_count[i] += 1;
            }
        }
    }
    let mut acc: Option<Var> = None;
    for (corr, mask) in &per_view {
        let mut weight = Vec::with_capacity(n * groups);
        for i in 0..n {
            let w = if mask[i] && valid_count[i] > 0 {
                1.0 / valid_count[i] as f64
            } else {
                0.0
            };
            for _ in 0..groups {
                weight.push(w);
            }
        }
        let weight = tape.constant(
            ValueGrid::from_vec(&[d, h, w, groups], weight).expect("sized"),
        );
        let contrib = tape.mul(*corr, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib)?,
            None => contrib,
        });
    }
    let total = acc.expect("at least one source view");
    let volume = tape.permute(total, &[1, 2, 3, 0])?; // [H, W, G, D]
    Ok(CostVolume {
        var: volume,
        height: h,
        width: w,
        groups,
        depths: d,
    })
}

/// Depth readout strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthMode {
    WinnerTakeAll,
    Expectation,
}

/// Reads a depth and confidence map out of a normalized probability volume
/// (`[H, W, D]`). Winner-take-all picks the argmax hypothesis (ties to the
/// lowest index); expectation integrates the hypotheses against the
/// distribution. Confidence is the per-pixel maximum probability.
pub fn to_depth(
    prob: &ValueGrid,
    hyps: &DepthHypotheses,
    mode: DepthMode,
) -> (DepthMap, ValueGrid) {
    let h = prob.shape()[0];
    let w = prob.shape()[1];
    let d = prob.shape()[2];
    debug_assert_eq!(d, hyps.count);
    let mut depth = DepthMap::filled(h, w, 0.0);
    let mut conf = ValueGrid::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let row = &prob.data()[(y * w + x) * d..(y * w + x + 1) * d];
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for (k, &p) in row.iter().enumerate() {
                if p > best_p {
                    best_p = p;
                    best = k;
                }
            }
            let value = match mode {
                DepthMode::WinnerTakeAll => hyps.at(y, x, best),
                DepthMode::Expectation => row
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| p * hyps.at(y, x, k))
                    .sum(),
            };
            depth.set(y, x, value);
            conf.set(&[y, x], best_p);
        }
    }
    (depth, conf)
}

/// Differentiable expectation depth `Σ_d P·d` on the tape.
pub fn expectation_depth(
    tape: &mut Tape,
    prob: Var,
    hyps: &DepthHypotheses,
) -> TapeResult<Var> {
    let shape = tape.shape(prob).to_vec();
    let values = tape.constant(hyps.values.clone());
    let weighted = tape.mul(prob, values)?;
    let depth = tape.sum_axis(weighted, 2)?;
    tape.reshape(depth, &shape[..2])
}
