//! Three-stage cascade orchestration: inference and the toy training loop.
//!
//! The coarsest stage runs twice: the first pass estimates a depth map from
//! the raw quarter-resolution features (no cross-view attention, direct
//! softmax regularization) purely to anchor the epipolar windows; the second
//! pass applies the window transformers and the learned regularizer. The
//! transformed coarse features are then propagated to the finer stages,
//! which narrow the hypothesis range around the upsampled previous estimate.

use crate::camera::{DepthField, DepthMap, PixelMask, ScaledNearestDepth, ViewCamera};
use crate::cost_volume::{
    build_cost_volume, expectation_depth, generate_hypotheses, to_depth, CostVolumeError,
    DepthHypotheses, DepthMode, HypothesisConfig,
};
use crate::epipolar_attention::{
    feature_pathway, inter_attention, intra_attention, warp_window_centers, WetConfig, WetError,
    WetParams,
};
use crate::fpn::{Pyramid, PyramidConfig, PyramidError};
use crate::grid::ValueGrid;
use crate::loss::{ce_loss, geo_loss, total_loss, LossConfig, LossError};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::params::{BoundParams, ParamError, ParamStore};
use crate::regularizer::{CtConfig, RegKind, Regularizer, RegularizerError};
use crate::scene::{LoadedScene, SyntheticScene};
use crate::tape::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("view {view} is {h}×{w}, expected {eh}×{ew} like the reference")]
    ResolutionMismatch {
        view: usize,
        h: usize,
        w: usize,
        eh: usize,
        ew: usize,
    },
    #[error("training diverged at step {step}: {dump}")]
    Diverged { step: usize, dump: String },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Wet(#[from] WetError),
    #[error(transparent)]
    CostVolume(#[from] CostVolumeError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Everything that shapes a run. Defaults mirror the published training
/// recipe at desk scale.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub views: usize,
    pub hypotheses: HypothesisConfig,
    /// Correlation group count.
    pub groups: usize,
    pub pyramid: PyramidConfig,
    pub wet: WetConfig,
    pub ct: CtConfig,
    pub reg_kind: RegKind,
    pub loss: LossConfig,
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Fractions of the step budget after which the rate decays (the
    /// 6/16, 8/16, 12/16 epoch schedule).
    pub lr_milestones: Vec<f64>,
    pub seed: u64,
    /// Depth readout feeding the epipolar window anchors: the expectation
    /// is smoother than winner-take-all.
    pub anchor_expectation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            views: 5,
            hypotheses: HypothesisConfig::default(),
            groups: 4,
            pyramid: PyramidConfig::default(),
            wet: WetConfig::default(),
            ct: CtConfig::default(),
            reg_kind: RegKind::Transformer,
            loss: LossConfig::default(),
            steps: 200,
            lr: 0.001,
            lr_decay: 0.5,
            lr_milestones: vec![6.0 / 16.0, 8.0 / 16.0, 12.0 / 16.0],
            seed: 0,
            anchor_expectation: true,
        }
    }
}

/// The learned pipeline: feature pyramid, window transformers, one
/// regularizer instance per stage.
pub struct Model {
    pub cfg: PipelineConfig,
    pub store: ParamStore,
    pyramid: Pyramid,
    wet: WetParams,
    regularizers: [Regularizer; 3],
}

impl Model {
    pub fn new(cfg: PipelineConfig) -> Result<Model, PipelineError> {
        cfg.loss.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pyramid = Pyramid::register(&mut store, "pyramid", cfg.pyramid, &mut rng)?;
        let channels = (
            cfg.pyramid.quarter_channels,
            cfg.pyramid.half_channels,
            cfg.pyramid.full_channels,
        );
        let wet = WetParams::register(
            &mut store,
            "wet",
            cfg.wet.clone(),
            channels,
            &crate::attention::AttentionInit::default(),
            &mut rng,
        )?;
        let regularizers = [
            Regularizer::register(&mut store, "reg.s0", cfg.reg_kind, cfg.groups, &cfg.ct, &mut rng)?,
            Regularizer::register(&mut store, "reg.s1", cfg.reg_kind, cfg.groups, &cfg.ct, &mut rng)?,
            Regularizer::register(&mut store, "reg.s2", cfg.reg_kind, cfg.groups, &cfg.ct, &mut rng)?,
        ];
        Ok(Model {
            cfg,
            store,
            pyramid,
            wet,
            regularizers,
        })
    }

    pub fn save(&self, base: &std::path::Path) -> Result<(), PipelineError> {
        self.store.save(base)?;
        Ok(())
    }

    pub fn load(&mut self, base: &std::path::Path) -> Result<(), PipelineError> {
        self.store.load(base)?;
        Ok(())
    }
}

/// Per-stage artifacts of one forward pass.
pub struct StagePass {
    /// Probability volume `[H, W, D]` on the tape.
    pub prob: Var,
    pub hypotheses: DepthHypotheses,
    /// Winner-take-all depth (inference readout).
    pub depth: DepthMap,
    pub confidence: ValueGrid,
    /// Differentiable expectation depth (training readout).
    pub depth_expectation: Var,
    pub ref_cam: ViewCamera,
    pub src_cams: Vec<ViewCamera>,
    /// Stage resolution relative to full.
    pub scale: f64,
}

pub struct ForwardPass {
    pub stages: [StagePass; 3],
    /// Anchor depth from the first coarse iteration.
    pub coarse_anchor: DepthMap,
    /// Number of coarse-stage cost-volume iterations (always two: one
    /// anchor pass without cross-view attention, one attended pass).
    pub coarse_iterations: usize,
}

impl Model {
    /// Runs the full cascade on one sample (reference view first).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: &[ValueGrid],
        cams: &[ViewCamera],
    ) -> Result<ForwardPass, PipelineError> {
        if images.len() < 2 {
            return Err(PipelineError::TooFewViews(images.len()));
        }
        let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
        for (v, img) in images.iter().enumerate() {
            let (ih, iw) = (img.shape()[0], img.shape()[1]);
            if ih != h || iw != w {
                return Err(PipelineError::ResolutionMismatch {
                    view: v,
                    h: ih,
                    w: iw,
                    eh: h,
                    ew: w,
                });
            }
        }

        // Feature pyramids per view.
        let mut quarter = Vec::with_capacity(images.len());
        let mut half = Vec::with_capacity(images.len());
        let mut full = Vec::with_capacity(images.len());
        for img in images {
            let v = tape.constant(img.clone());
            let pyr = self.pyramid.extract(tape, bound, v)?;
            quarter.push(pyr.quarter);
            half.push(pyr.half);
            full.push(pyr.full);
        }

        let cams_q: Vec<ViewCamera> = cams.iter().map(|c| c.scaled(0.25)).collect();
        let cams_h: Vec<ViewCamera> = cams.iter().map(|c| c.scaled(0.5)).collect();
        let range = cams[0].depth_range;
        let (hq, wq) = (h / 4, w / 4);

        // Coarse iteration 1: anchor depth without cross-view attention.
        let hyps0 = generate_hypotheses(0, None, range, hq, wq, &self.cfg.hypotheses)?;
        let vol_it1 = build_cost_volume(
            tape,
            quarter[0],
            &quarter[1..],
            &cams_q[0],
            &cams_q[1..],
            &hyps0,
            self.cfg.groups,
        )?;
        let prob_it1 = Regularizer::None.apply(tape, bound, &vol_it1)?;
        let anchor_mode = if self.cfg.anchor_expectation {
            DepthMode::Expectation
        } else {
            DepthMode::WinnerTakeAll
        };
        let (coarse_anchor, _) = to_depth(tape.value(prob_it1), &hyps0, anchor_mode);

        // Window transformers on the quarter features: per-view
        // self-attention, then epipolar cross-attention updating sources.
        let mut transformed: Vec<Var> = Vec::with_capacity(quarter.len());
        for &f in &quarter {
            transformed.push(intra_attention(tape, bound, &self.wet, f)?);
        }
        let ref_feat = transformed[0];
        for s in 1..transformed.len() {
            let map = warp_window_centers(
                &cams_q[0],
                &cams_q[s],
                &coarse_anchor,
                self.cfg.wet.window,
                [hq, wq],
            );
            transformed[s] = inter_attention(tape, bound, &self.wet, ref_feat, transformed[s], &map)?;
        }

        // Coarse iteration 2: attended features, learned regularizer.
        let vol0 = build_cost_volume(
            tape,
            transformed[0],
            &transformed[1..],
            &cams_q[0],
            &cams_q[1..],
            &hyps0,
            self.cfg.groups,
        )?;
        let prob0 = self.regularizers[0].apply(tape, bound, &vol0)?;
        let (depth0, conf0) = to_depth(tape.value(prob0), &hyps0, DepthMode::WinnerTakeAll);
        let expect0 = expectation_depth(tape, prob0, &hyps0)?;

        // Propagate the transformed coarse features into the finer stages.
        for v in 0..images.len() {
            let (h2, f2) = feature_pathway(tape, bound, &self.wet, transformed[v], half[v], full[v])?;
            half[v] = h2;
            full[v] = f2;
        }

        // Stage 2 at half resolution.
        let up1 = depth0.upsample_bilinear(2);
        let hyps1 = generate_hypotheses(1, Some(&up1), range, h / 2, w / 2, &self.cfg.hypotheses)?;
        let vol1 = build_cost_volume(
            tape,
            half[0],
            &half[1..],
            &cams_h[0],
            &cams_h[1..],
            &hyps1,
            self.cfg.groups,
        )?;
        let prob1 = self.regularizers[1].apply(tape, bound, &vol1)?;
        let (depth1, conf1) = to_depth(tape.value(prob1), &hyps1, DepthMode::WinnerTakeAll);
        let expect1 = expectation_depth(tape, prob1, &hyps1)?;

        // Stage 3 at full resolution.
        let up2 = depth1.upsample_bilinear(2);
        let hyps2 = generate_hypotheses(2, Some(&up2), range, h, w, &self.cfg.hypotheses)?;
        let vol2 = build_cost_volume(
            tape,
            full[0],
            &full[1..],
            cams.first().expect("validated"),
            &cams[1..],
            &hyps2,
            self.cfg.groups,
        )?;
        let prob2 = self.regularizers[2].apply(tape, bound, &vol2)?;
        let (depth2, conf2) = to_depth(tape.value(prob2), &hyps2, DepthMode::WinnerTakeAll);
        let expect2 = expectation_depth(tape, prob2, &hyps2)?;

        Ok(ForwardPass {
            stages: [
                StagePass {
                    prob: prob0,
                    hypotheses: hyps0,
                    depth: depth0,
                    confidence: conf0,
                    depth_expectation: expect0,
                    ref_cam: cams_q[0].clone(),
                    src_cams: cams_q[1..].to_vec(),
                    scale: 0.25,
                },
                StagePass {
                    prob: prob1,
                    hypotheses: hyps1,
                    depth: depth1,
                    confidence: conf1,
                    depth_expectation: expect1,
                    ref_cam: cams_h[0].clone(),
                    src_cams: cams_h[1..].to_vec(),
                    scale: 0.5,
                },
                StagePass {
                    prob: prob2,
                    hypotheses: hyps2,
                    depth: depth2,
                    confidence: conf2,
                    depth_expectation: expect2,
                    ref_cam: cams[0].clone(),
                    src_cams: cams[1..].to_vec(),
                    scale: 1.0,
                },
            ],
            coarse_anchor,
            coarse_iterations: 2,
        })
    }
}

/// Inference output: the full-resolution depth and confidence plus
/// per-stage diagnostics.
pub struct Inference {
    pub depth: DepthMap,
    pub confidence: ValueGrid,
    pub stage_depths: Vec<DepthMap>,
    pub stage_confidences: Vec<ValueGrid>,
    pub coarse_iterations: usize,
}

impl Model {
    /// Depth for the reference view (`images[0]`), winner-take-all readout.
    pub fn infer(
        &self,
        images: &[ValueGrid],
        cams: &[ViewCamera],
    ) -> Result<Inference, PipelineError> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let pass = self.forward(&mut tape, &bound, images, cams)?;
        let [s0, s1, s2] = pass.stages;
        Ok(Inference {
            depth: s2.depth.clone(),
            confidence: s2.confidence.clone(),
            stage_depths: vec![s0.depth, s1.depth, s2.depth],
            stage_confidences: vec![s0.confidence, s1.confidence, s2.confidence],
            coarse_iterations: pass.coarse_iterations,
        })
    }
}

// ── Training ────────────────────────────────────────────────────────────

/// A training view set: images with the reference first, cameras, and
/// ground truth for every view (grids from files, exact analytic lookups
/// for synthetic scenes).
pub enum SampleSource<'a> {
    Synthetic(&'a SyntheticScene),
    Loaded(&'a LoadedScene),
}

pub struct Dataset<'a> {
    source: SampleSource<'a>,
    /// View orderings, reference first.
    pub samples: Vec<Vec<usize>>,
}

impl<'a> Dataset<'a> {
    /// One sample per view, each view taking a turn as the reference.
    pub fn all_references(source: SampleSource<'a>) -> Dataset<'a> {
        let views = match &source {
            SampleSource::Synthetic(s) => s.cameras.len(),
            SampleSource::Loaded(s) => s.cameras.len(),
        };
        let samples = (0..views)
            .map(|r| {
                let mut order = vec![r];
                order.extend((0..views).filter(|&v| v != r));
                order
            })
            .collect();
        Dataset { source, samples }
    }

    /// A single sample with a fixed reference view.
    pub fn single_reference(source: SampleSource<'a>, reference: usize) -> Dataset<'a> {
        let views = match &source {
            SampleSource::Synthetic(s) => s.cameras.len(),
            SampleSource::Loaded(s) => s.cameras.len(),
        };
        let mut order = vec![reference];
        order.extend((0..views).filter(|&v| v != reference));
        Dataset {
            source,
            samples: vec![order],
        }
    }

    fn views(&self, sample: usize) -> (Vec<ValueGrid>, Vec<ViewCamera>) {
        let order = &self.samples[sample];
        match &self.source {
            SampleSource::Synthetic(s) => (
                order.iter().map(|&v| s.images[v].clone()).collect(),
                order.iter().map(|&v| s.cameras[v].clone()).collect(),
            ),
            SampleSource::Loaded(s) => (
                order.iter().map(|&v| s.images[v].clone()).collect(),
                order.iter().map(|&v| s.cameras[v].clone()).collect(),
            ),
        }
    }

    /// Reference ground truth at a stage resolution, with its validity.
    fn gt_ref_at_scale(
        &self,
        sample: usize,
        scale: f64,
        height: usize,
        width: usize,
    ) -> (DepthMap, PixelMask) {
        let ref_view = self.samples[sample][0];
        let mut depth = DepthMap::filled(height, width, 0.0);
        match &self.source {
            SampleSource::Synthetic(s) => {
                let field = s.depth_field_scaled(ref_view, scale);
                for y in 0..height {
                    for x in 0..width {
                        if let Some(d) = field.depth_at(x as f64, y as f64) {
                            depth.set(y, x, d);
                        }
                    }
                }
            }
            SampleSource::Loaded(s) => {
                let field = ScaledNearestDepth {
                    map: &s.gt_depths[ref_view],
                    scale,
                };
                for y in 0..height {
                    for x in 0..width {
                        if let Some(d) = field.depth_at(x as f64, y as f64) {
                            depth.set(y, x, d);
                        }
                    }
                }
            }
        }
        let mask = depth.valid_mask();
        (depth, mask)
    }

    /// Per-source ground-truth depth lookups at a stage scale.
    fn src_fields_at_scale(&self, sample: usize, scale: f64) -> Vec<Box<dyn DepthField + '_>> {
        let order = &self.samples[sample];
        order[1..]
            .iter()
            .map(|&v| -> Box<dyn DepthField + '_> {
                match &self.source {
                    SampleSource::Synthetic(s) => Box::new(s.depth_field_scaled(v, scale)),
                    SampleSource::Loaded(s) => Box::new(ScaledNearestDepth {
                        map: &s.gt_depths[v],
                        scale,
                    }),
                }
            })
            .collect()
    }
}

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub step: usize,
    pub sample: usize,
    pub lr: f64,
    pub stage_ce: [f64; 3],
    pub stage_geo: [f64; 3],
    pub total: f64,
}

impl TrainRecord {
    pub fn csv_header() -> &'static str {
        "step,stage,ce,geo,total"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for k in 0..3 {
            out.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9}\n",
                self.step, k, self.stage_ce[k], self.stage_geo[k], self.total
            ));
        }
        out
    }
}

/// Gradient steps on the combined loss with the step-decay schedule.
/// Deterministic given the model seed; samples rotate round-robin.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    steps: usize,
) -> Result<Vec<TrainRecord>, PipelineError> {
    let schedule = LrSchedule {
        base_lr: model.cfg.lr,
        factor: model.cfg.lr_decay,
        milestones: model.cfg.lr_milestones.clone(),
    };
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let sample = step % dataset.samples.len();
        let (images, cams) = dataset.views(sample);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &images, &cams)?;

        let mut ce_terms = Vec::with_capacity(3);
        let mut geo_terms = Vec::with_capacity(3);
        let mut ce_vals = [0.0; 3];
        let mut geo_vals = [0.0; 3];
        for (k, stage) in pass.stages.iter().enumerate() {
            let (gt, valid) = dataset.gt_ref_at_scale(
                sample,
                stage.scale,
                stage.hypotheses.height,
                stage.hypotheses.width,
            );
            let ce = ce_loss(&mut tape, stage.prob, &gt, &stage.hypotheses, &valid)?;
            let fields = dataset.src_fields_at_scale(sample, stage.scale);
            let field_refs: Vec<&dyn DepthField> = fields.iter().map(|b| b.as_ref()).collect();
            let geo = geo_loss(
                &mut tape,
                stage.depth_expectation,
                &field_refs,
                &stage.ref_cam,
                &stage.src_cams,
                &valid,
                &model.cfg.loss,
                k,
            )?;
            ce_vals[k] = tape.value(ce).data()[0];
            geo_vals[k] = tape.value(geo.loss).data()[0];
            ce_terms.push(ce);
            geo_terms.push(geo.loss);
        }
        let total = total_loss(
            &mut tape,
            &[ce_terms[0], ce_terms[1], ce_terms[2]],
            &[geo_terms[0], geo_terms[1], geo_terms[2]],
            &model.cfg.loss,
        )?;
        let total_val = tape.value(total).data()[0];
        if !total_val.is_finite() {
            return Err(PipelineError::Diverged {
                step,
                dump: format!(
                    "total={total_val}, ce={ce_vals:?}, geo={geo_vals:?}, lr={}",
                    schedule.lr_at(step, steps)
                ),
            });
        }

        tape.backward_scalar(total)?;
        let grads: Vec<Option<ValueGrid>> = model
            .store
            .ids()
            .map(|id| tape.gradient(bound.var(id)).ok())
            .collect();
        let lr = schedule.lr_at(step, steps);
        adam.step(&mut model.store, &grads, lr);

        log.push(TrainRecord {
            step,
            sample,
            lr,
            stage_ce: ce_vals,
            stage_geo: geo_vals,
            total: total_val,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, Geometry, SceneSpec};

    /// Small-but-real configuration for fast pipeline tests.
    pub(crate) fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            views: 3,
            hypotheses: HypothesisConfig {
                counts: [12, 8, 4],
                ..HypothesisConfig::default()
            },
            groups: 2,
            pyramid: PyramidConfig {
                quarter_channels: 8,
                half_channels: 6,
                full_channels: 4,
                init_gain: 1.0,
            },
            wet: WetConfig {
                window: [4, 5],
                blocks: 1,
                heads: 2,
                cross_position_bias: true,
            },
            ct: CtConfig {
                block_extents: [2, 2, 2],
                embed_channels: 8,
                blocks: 2,
                window: [2, 2, 2],
                head_dim: 4,
                decode_channels: 4,
                merge_depth_axis: true,
            },
            reg_kind: RegKind::Transformer,
            loss: LossConfig::default(),
            steps: 4,
            lr: 0.001,
            lr_decay: 0.5,
            lr_milestones: vec![0.375, 0.5, 0.75],
            seed: 0,
            anchor_expectation: true,
        }
    }

    fn tiny_scene() -> SceneSpec {
        SceneSpec {
            geometry: Geometry::Plane,
            views: 3,
            height: 16,
            width: 24,
            focal: 24.0,
            arc_radius: 2.0,
            arc_span_deg: 18.0,
            depth_range: (1.2, 3.2),
            checker_period: 0.3,
            noise_scales: vec![0.15, 0.5],
            noise_amplitude: 0.5,
            cloud_stride: 2,
        }
    }

    #[test]
    fn inference_shapes_and_iteration_count() {
        let scene = generate(&tiny_scene(), 0).unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let out = model.infer(&scene.images, &scene.cameras).unwrap();
        assert_eq!(out.depth.height, 16);
        assert_eq!(out.depth.width, 24);
        assert_eq!(out.stage_depths[0].height, 4);
        assert_eq!(out.stage_depths[0].width, 6);
        assert_eq!(out.stage_depths[1].height, 8);
        assert_eq!(out.stage_depths[1].width, 12);
        assert_eq!(out.coarse_iterations, 2);
    }

    #[test]
    fn inference_is_deterministic() {
        let scene = generate(&tiny_scene(), 1).unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let a = model.infer(&scene.images, &scene.cameras).unwrap();
        let b = model.infer(&scene.images, &scene.cameras).unwrap();
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.confidence.data(), b.confidence.data());
    }

    #[test]
    fn mismatched_resolutions_are_rejected() {
        let scene = generate(&tiny_scene(), 2).unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let mut images = scene.images.clone();
        images[1] = ValueGrid::zeros(&[16, 20, 3]);
        assert!(matches!(
            model.infer(&images, &scene.cameras),
            Err(PipelineError::ResolutionMismatch { view: 1, .. })
        ));
    }

    #[test]
    fn later_hypotheses_bracket_previous_estimate() {
        let scene = generate(&tiny_scene(), 3).unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let pass = model
            .forward(&mut tape, &bound, &scene.images, &scene.cameras)
            .unwrap();
        let up = pass.stages[0].depth.upsample_bilinear(2);
        let hyps = &pass.stages[1].hypotheses;
        let (dmin, dmax) = scene.cameras[0].depth_range;
        for y in 0..hyps.height {
            for x in 0..hyps.width {
                let prev = up.at(y, x).clamp(dmin, dmax);
                assert!(hyps.at(y, x, 0) <= prev + 1e-9);
                assert!(hyps.at(y, x, hyps.count - 1) >= prev - 1e-9);
            }
        }
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let scene = generate(&tiny_scene(), 4).unwrap();
        let mut model = Model::new(tiny_config()).unwrap();
        let before: Vec<Vec<f64>> = model
            .store
            .ids()
            .map(|id| model.store.grid(id).data().to_vec())
            .collect();
        let dataset = Dataset::single_reference(SampleSource::Synthetic(&scene), 0);
        let log = train(&mut model, &dataset, 0).unwrap();
        assert!(log.is_empty());
        for (i, id) in model.store.ids().enumerate() {
            assert_eq!(model.store.grid(id).data(), before[i].as_slice());
        }
    }

    #[test]
    fn a_few_training_steps_run_and_log() {
        let scene = generate(&tiny_scene(), 5).unwrap();
        let mut model = Model::new(tiny_config()).unwrap();
        let dataset = Dataset::single_reference(SampleSource::Synthetic(&scene), 0);
        let log = train(&mut model, &dataset, 3).unwrap();
        assert_eq!(log.len(), 3);
        for rec in &log {
            assert!(rec.total.is_finite());
            assert!(rec.stage_ce.iter().all(|v| v.is_finite()));
            assert!(rec.stage_geo.iter().all(|v| v.is_finite()));
        }
        // Losses feed the optimizer: at least some parameters must move.
        let moved = model
            .store
            .ids()
            .any(|id| model.store.grid(id).data().iter().any(|&v| v != 0.0));
        assert!(moved);
    }
}
