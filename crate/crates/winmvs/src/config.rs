//! `key=value` run and scene configuration files.
//!
//! One flat text file drives a whole run; every key has a default matching
//! the published training recipe, unknown keys are rejected by name, and
//! the resolved configuration can be re-emitted deterministically.

use crate::cost_volume::{DecayMode, HypothesisConfig};
use crate::epipolar_attention::WetConfig;
use crate::fpn::PyramidConfig;
use crate::fusion::FilterThresholds;
use crate::loss::{GeoSetMode, LossConfig};
use crate::pipeline::PipelineConfig;
use crate::regularizer::{CtConfig, RegKind};
use crate::scene::{Geometry, SceneSpec};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("key {key}: {detail}")]
    BadValue { key: String, detail: String },
    #[error("line {line}: expected `key=value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered key→value map parsed from a config file body.
pub struct KeyValues {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues, ConfigError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KeyValues {
            values,
            consumed: Default::default(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse_with<T>(
        &self,
        key: &str,
        default: T,
        f: impl Fn(&str) -> Option<T>,
    ) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => f(raw).ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("cannot parse {raw:?}"),
            }),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, default, |s| match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    pub fn f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        self.parse_with(key, default.to_vec(), |s| {
            s.split(',').map(|t| t.trim().parse().ok()).collect()
        })
    }

    pub fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.parse_with(key, default.to_vec(), |s| {
            s.split(',').map(|t| t.trim().parse().ok()).collect()
        })
    }

    /// `AxBxC` extents.
    pub fn extents(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.parse_with(key, default.to_vec(), |s| {
            s.split('x').map(|t| t.trim().parse().ok()).collect()
        })
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String, ConfigError> {
        Ok(self.get(key).unwrap_or(default).to_string())
    }

    /// Errors when any key was never consumed by a getter.
    pub fn finish(self) -> Result<(), ConfigError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown))
        }
    }
}

/// Full run configuration: the pipeline plus fusion and evaluation knobs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub filter: FilterThresholds,
    pub eval_tau: f64,
    pub eval_outlier_cap: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            filter: FilterThresholds::default(),
            eval_tau: 0.02,
            eval_outlier_cap: f64::INFINITY,
        }
    }
}

fn fixed3(key: &str, v: Vec<f64>) -> Result<[f64; 3], ConfigError> {
    <[f64; 3]>::try_from(v).map_err(|v| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("expected 3 values, got {}", v.len()),
    })
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    let kv = KeyValues::parse(text)?;
    let d = RunConfig::default();
    let dp = &d.pipeline;

    let counts = kv.usize_list("stage_hypotheses", &dp.hypotheses.counts)?;
    let counts: [usize; 3] = counts.try_into().map_err(|v: Vec<usize>| ConfigError::BadValue {
        key: "stage_hypotheses".into(),
        detail: format!("expected 3 values, got {}", v.len()),
    })?;
    let decay = kv.f64_list("interval_decay", &dp.hypotheses.decay)?;
    let decay: [f64; 2] = decay.try_into().map_err(|v: Vec<f64>| ConfigError::BadValue {
        key: "interval_decay".into(),
        detail: format!("expected 2 values, got {}", v.len()),
    })?;
    let mode = match kv.string("decay_mode", "chained")?.as_str() {
        "chained" => DecayMode::Chained,
        "from_first" => DecayMode::FromFirst,
        other => {
            return Err(ConfigError::BadValue {
                key: "decay_mode".into(),
                detail: format!("unknown mode {other:?}"),
            })
        }
    };

    let pyr = kv.usize_list(
        "pyramid_channels",
        &[
            dp.pyramid.quarter_channels,
            dp.pyramid.half_channels,
            dp.pyramid.full_channels,
        ],
    )?;
    if pyr.len() != 3 {
        return Err(ConfigError::BadValue {
            key: "pyramid_channels".into(),
            detail: format!("expected 3 values, got {}", pyr.len()),
        });
    }

    let wet_window = kv.extents("wet_window", &dp.wet.window)?;
    let wet_window: [usize; 2] = wet_window.try_into().map_err(|v: Vec<usize>| {
        ConfigError::BadValue {
            key: "wet_window".into(),
            detail: format!("expected HxW, got {v:?}"),
        }
    })?;
    let ct_window = kv.extents("ct_window", &dp.ct.window)?;
    let ct_window: [usize; 3] = ct_window.try_into().map_err(|v: Vec<usize>| {
        ConfigError::BadValue {
            key: "ct_window".into(),
            detail: format!("expected DxHxW, got {v:?}"),
        }
    })?;
    let ct_block = kv.extents("ct_block_embed", &dp.ct.block_extents)?;
    let ct_block: [usize; 3] = ct_block.try_into().map_err(|v: Vec<usize>| {
        ConfigError::BadValue {
            key: "ct_block_embed".into(),
            detail: format!("expected DxHxW, got {v:?}"),
        }
    })?;

    let reg_name = kv.string("reg", dp.reg_kind.name())?;
    let reg_kind = RegKind::parse(&reg_name).ok_or_else(|| ConfigError::BadValue {
        key: "reg".into(),
        detail: format!("unknown regularizer {reg_name:?}"),
    })?;
    let geo_name = kv.string("geo_set", dp.loss.set_mode.name())?;
    let set_mode = GeoSetMode::parse(&geo_name).ok_or_else(|| ConfigError::BadValue {
        key: "geo_set".into(),
        detail: format!("unknown set mode {geo_name:?}"),
    })?;

    let cfg = RunConfig {
        pipeline: PipelineConfig {
            views: kv.usize("views", dp.views)?,
            hypotheses: HypothesisConfig {
                counts,
                decay,
                mode,
            },
            groups: kv.usize("groups", dp.groups)?,
            pyramid: PyramidConfig {
                quarter_channels: pyr[0],
                half_channels: pyr[1],
                full_channels: pyr[2],
                init_gain: kv.f64("pyramid_init_gain", dp.pyramid.init_gain)?,
            },
            wet: WetConfig {
                window: wet_window,
                blocks: kv.usize("wet_blocks", dp.wet.blocks)?,
                heads: kv.usize("wet_heads", dp.wet.heads)?,
                cross_position_bias: kv.bool("wet_cross_bias", dp.wet.cross_position_bias)?,
            },
            ct: CtConfig {
                block_extents: ct_block,
                embed_channels: kv.usize("ct_embed_channels", dp.ct.embed_channels)?,
                blocks: kv.usize("ct_blocks", dp.ct.blocks)?,
                window: ct_window,
                head_dim: kv.usize("ct_head_dim", dp.ct.head_dim)?,
                decode_channels: kv.usize("ct_decode_channels", dp.ct.decode_channels)?,
                merge_depth_axis: kv.bool("ct_merge_depth", dp.ct.merge_depth_axis)?,
            },
            reg_kind,
            loss: LossConfig {
                gamma: kv.f64("gamma", dp.loss.gamma)?,
                lambda_ce: kv.f64("lambda1", dp.loss.lambda_ce)?,
                lambda_geo: kv.f64("lambda2", dp.loss.lambda_geo)?,
                tau_pixel: fixed3("tau1", kv.f64_list("tau1", &dp.loss.tau_pixel)?)?,
                tau_depth: fixed3("tau2", kv.f64_list("tau2", &dp.loss.tau_depth)?)?,
                set_mode,
            },
            steps: kv.usize("steps", dp.steps)?,
            lr: kv.f64("lr", dp.lr)?,
            lr_decay: kv.f64("lr_decay", dp.lr_decay)?,
            lr_milestones: kv.f64_list("lr_milestones", &dp.lr_milestones)?,
            seed: kv.u64("seed", dp.seed)?,
            anchor_expectation: kv.bool("anchor_expectation", dp.anchor_expectation)?,
        },
        filter: FilterThresholds {
            pixel: kv.f64("filter_pixel", d.filter.pixel)?,
            depth: kv.f64("filter_depth", d.filter.depth)?,
            min_consistent: kv.usize("filter_min_views", d.filter.min_consistent)?,
            min_confidence: kv.f64("filter_min_confidence", d.filter.min_confidence)?,
        },
        eval_tau: kv.f64("eval_tau", d.eval_tau)?,
        eval_outlier_cap: kv.f64("eval_outlier_cap", d.eval_outlier_cap)?,
    };
    kv.finish()?;
    Ok(cfg)
}

/// Serializes the resolved run configuration (stable key order).
pub fn run_config_text(cfg: &RunConfig) -> String {
    let p = &cfg.pipeline;
    let mode = match p.hypotheses.mode {
        DecayMode::Chained => "chained",
        DecayMode::FromFirst => "from_first",
    };
    format!(
        "views={}\n\
         stage_hypotheses={},{},{}\n\
         interval_decay={},{}\n\
         decay_mode={}\n\
         groups={}\n\
         pyramid_channels={},{},{}\n\
         pyramid_init_gain={}\n\
         wet_window={}x{}\n\
         wet_blocks={}\n\
         wet_heads={}\n\
         wet_cross_bias={}\n\
         ct_block_embed={}x{}x{}\n\
         ct_embed_channels={}\n\
         ct_blocks={}\n\
         ct_window={}x{}x{}\n\
         ct_head_dim={}\n\
         ct_decode_channels={}\n\
         ct_merge_depth={}\n\
         reg={}\n\
         gamma={}\n\
         lambda1={}\n\
         lambda2={}\n\
         tau1={},{},{}\n\
         tau2={},{},{}\n\
         geo_set={}\n\
         steps={}\n\
         lr={}\n\
         lr_decay={}\n\
         lr_milestones={}\n\
         seed={}\n\
         anchor_expectation={}\n\
         filter_pixel={}\n\
         filter_depth={}\n\
         filter_min_views={}\n\
         filter_min_confidence={}\n\
         eval_tau={}\n\
         eval_outlier_cap={}\n",
        p.views,
        p.hypotheses.counts[0],
        p.hypotheses.counts[1],
        p.hypotheses.counts[2],
        p.hypotheses.decay[0],
        p.hypotheses.decay[1],
        mode,
        p.groups,
        p.pyramid.quarter_channels,
        p.pyramid.half_channels,
        p.pyramid.full_channels,
        p.pyramid.init_gain,
        p.wet.window[0],
        p.wet.window[1],
        p.wet.blocks,
        p.wet.heads,
        p.wet.cross_position_bias,
        p.ct.block_extents[0],
        p.ct.block_extents[1],
        p.ct.block_extents[2],
        p.ct.embed_channels,
        p.ct.blocks,
        p.ct.window[0],
        p.ct.window[1],
        p.ct.window[2],
        p.ct.head_dim,
        p.ct.decode_channels,
        p.ct.merge_depth_axis,
        p.reg_kind.name(),
        p.loss.gamma,
        p.loss.lambda_ce,
        p.loss.lambda_geo,
        p.loss.tau_pixel[0],
        p.loss.tau_pixel[1],
        p.loss.tau_pixel[2],
        p.loss.tau_depth[0],
        p.loss.tau_depth[1],
        p.loss.tau_depth[2],
        p.loss.set_mode.name(),
        p.steps,
        p.lr,
        p.lr_decay,
        p.lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
        p.seed,
        p.anchor_expectation,
        cfg.filter.pixel,
        cfg.filter.depth,
        cfg.filter.min_consistent,
        cfg.filter.min_confidence,
        cfg.eval_tau,
        cfg.eval_outlier_cap,
    )
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec, ConfigError> {
    let kv = KeyValues::parse(text)?;
    let d = SceneSpec::standard_plane();
    let geometry_name = kv.string("geometry", "plane")?;
    let geometry_param = kv.f64(
        "geometry_param",
        match geometry_name.as_str() {
            "sphere" => 0.9,
            _ => 0.35,
        },
    )?;
    let geometry = Geometry::parse(&geometry_name, geometry_param).map_err(|e| {
        ConfigError::BadValue {
            key: "geometry".into(),
            detail: e.to_string(),
        }
    })?;
    let spec = SceneSpec {
        geometry,
        views: kv.usize("views", d.views)?,
        height: kv.usize("height", d.height)?,
        width: kv.usize("width", d.width)?,
        focal: kv.f64("focal", d.focal)?,
        arc_radius: kv.f64("arc_radius", d.arc_radius)?,
        arc_span_deg: kv.f64("arc_span_deg", d.arc_span_deg)?,
        depth_range: (
            kv.f64("depth_min", d.depth_range.0)?,
            kv.f64("depth_max", d.depth_range.1)?,
        ),
        checker_period: kv.f64("checker_period", d.checker_period)?,
        noise_scales: kv.f64_list("noise_scales", &d.noise_scales)?,
        noise_amplitude: kv.f64("noise_amplitude", d.noise_amplitude)?,
        cloud_stride: kv.usize("cloud_stride", d.cloud_stride)?,
    };
    kv.finish()?;
    Ok(spec)
}

pub fn scene_spec_text(spec: &SceneSpec) -> String {
    let geometry_param = match spec.geometry {
        Geometry::Plane => 0.0,
        Geometry::Sphere { radius } => radius,
        Geometry::TwoPlaneStep { gap } => gap,
    };
    format!(
        "geometry={}\ngeometry_param={}\nviews={}\nheight={}\nwidth={}\nfocal={}\n\
         arc_radius={}\narc_span_deg={}\ndepth_min={}\ndepth_max={}\nchecker_period={}\n\
         noise_scales={}\nnoise_amplitude={}\ncloud_stride={}\n",
        spec.geometry.name(),
        geometry_param,
        spec.views,
        spec.height,
        spec.width,
        spec.focal,
        spec.arc_radius,
        spec.arc_span_deg,
        spec.depth_range.0,
        spec.depth_range.1,
        spec.checker_period,
        spec.noise_scales
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
        spec.noise_amplitude,
        spec.cloud_stride,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_recipe() {
        let cfg = parse_run_config("").unwrap();
        let p = &cfg.pipeline;
        assert_eq!(p.views, 5);
        assert_eq!(p.hypotheses.counts, [48, 32, 8]);
        assert_eq!(p.hypotheses.decay, [0.25, 0.5]);
        assert_eq!(p.loss.gamma, 100.0);
        assert_eq!(p.loss.lambda_ce, 2.0);
        assert_eq!(p.loss.lambda_geo, 1.0);
        assert_eq!(p.loss.tau_pixel, [3.0, 2.0, 1.0]);
        assert_eq!(p.loss.tau_depth, [0.1, 0.05, 0.01]);
        assert_eq!(p.wet.blocks, 1);
        assert_eq!(p.wet.window, [16, 16]);
        assert_eq!(p.ct.blocks, 3);
        assert_eq!(p.ct.window, [2, 8, 10]);
        assert_eq!(p.ct.block_extents, [2, 4, 4]);
        assert_eq!(p.lr, 0.001);
        assert_eq!(p.lr_decay, 0.5);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = parse_run_config("views=5\nbogus_key=1\nanother=2\n").unwrap_err();
        match err {
            ConfigError::UnknownKeys(keys) => {
                assert_eq!(keys, vec!["another".to_string(), "bogus_key".to_string()]);
            }
            other => panic!("expected UnknownKeys, got {other}"),
        }
    }

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.views = 7;
        cfg.pipeline.reg_kind = RegKind::Conv3d;
        cfg.pipeline.loss.set_mode = GeoSetMode::LiteralUnion;
        cfg.eval_tau = 0.1;
        let text = run_config_text(&cfg);
        let back = parse_run_config(&text).unwrap();
        assert_eq!(back.pipeline.views, 7);
        assert_eq!(back.pipeline.reg_kind, RegKind::Conv3d);
        assert_eq!(back.pipeline.loss.set_mode, GeoSetMode::LiteralUnion);
        assert_eq!(back.eval_tau, 0.1);
    }

    #[test]
    fn scene_spec_roundtrip() {
        let spec = SceneSpec::standard_sphere();
        let text = scene_spec_text(&spec);
        let back = parse_scene_spec(&text).unwrap();
        assert_eq!(back.geometry, spec.geometry);
        assert_eq!(back.views, spec.views);
        assert_eq!(back.depth_range, spec.depth_range);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = parse_run_config("gamma=squirrel\n").unwrap_err();
        match err {
            ConfigError::BadValue { key, .. } => assert_eq!(key, "gamma"),
            other => panic!("expected BadValue, got {other}"),
        }
    }
}
