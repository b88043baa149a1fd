//! Convolutional feature pyramid: per-view features at 1/4, 1/2 and full
//! resolution with top-down lateral fusion.
//!
//! Convolutions are expressed as an im2col gather (reflection padding, so
//! border taps stay inside the image) followed by a matrix product, which
//! keeps them on the differentiation record with no extra primitives.

use crate::params::{normal_grid, BoundParams, ParamError, ParamId, ParamStore};
use crate::tape::{Tape, TapeResult, Var};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("image size {height}×{width} must be a multiple of 4 (caller pads)")]
    BadSize { height: usize, width: usize },
    #[error("channel progression {0:?} must be strictly decreasing")]
    BadChannels(Vec<usize>),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Channel widths per stage: `quarter` is the deepest (1/4-resolution) map.
#[derive(Clone, Copy, Debug)]
pub struct PyramidConfig {
    pub quarter_channels: usize,
    pub half_channels: usize,
    pub full_channels: usize,
    pub init_gain: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            quarter_channels: 32,
            half_channels: 16,
            full_channels: 8,
            init_gain: 1.0,
        }
    }
}

/// Per-view multi-resolution features, as tape variables.
pub struct FeaturePyramid {
    /// `[H/4, W/4, C1]`
    pub quarter: Var,
    /// `[H/2, W/2, C2]`
    pub half: Var,
    /// `[H, W, C3]`
    pub full: Var,
}

/// 3×3/1×1 convolution over `[H, W, C]` grids with reflection padding,
/// expressed as an im2col gather plus a matrix product.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
}

impl ConvLayer {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ParamError> {
        let fan_in = (kernel * kernel * c_in) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let w = store.register(
            &format!("{name}.w"),
            normal_grid(rng, &[kernel * kernel * c_in, c_out], std),
        )?;
        let b = store.register(&format!("{name}.b"), crate::grid::ValueGrid::zeros(&[c_out]))?;
        Ok(ConvLayer {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
        })
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
    ) -> TapeResult<Var> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = (shape[0], shape[1]);
        debug_assert_eq!(shape[2], self.c_in);
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let half = (k / 2) as isize;
        let reflect = |v: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if v < 0 {
                -v
            } else if v >= n {
                2 * n - 2 - v
            } else {
                v
            };
            r.clamp(0, n - 1) as usize
        };
        let mut indices = Vec::with_capacity(oh * ow * k * k * self.c_in);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = reflect((oy * self.stride) as isize + ky as isize - half, h);
                        let ix = reflect((ox * self.stride) as isize + kx as isize - half, w);
                        let base = (iy * w + ix) * self.c_in;
                        for ci in 0..self.c_in {
                            indices.push(base + ci);
                        }
                    }
                }
            }
        }
        let flat = tape.reshape(x, &[h * w * self.c_in])?;
        let cols = tape.gather(flat, Rc::new(indices), &[oh * ow, k * k * self.c_in])?;
        let y = tape.linear(cols, bound.var(self.w), Some(bound.var(self.b)))?;
        tape.reshape(y, &[oh, ow, self.c_out])
    }
}

/// Bilinear ×`factor` upsampling of `[h, w, c]` features with pixel centers
/// aligned; border coordinates clamp so constants stay constant.
pub fn upsample_bilinear(
    tape: &mut Tape,
    x: Var,
    factor: usize,
) -> TapeResult<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut coords = Vec::with_capacity(oh * ow * 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            coords.push(sx);
            coords.push(sy);
        }
    }
    let coords = tape.constant(
        crate::grid::ValueGrid::from_vec(&[oh * ow, 2], coords).expect("sized"),
    );
    let sampled = tape.bilinear_sample(x, coords)?;
    tape.reshape(sampled, &[oh, ow, c])
}

/// The extractor: three stride-2 encoder stages plus top-down fusion.
pub struct Pyramid {
    cfg: PyramidConfig,
    enc0a: ConvLayer,
    enc0b: ConvLayer,
    enc1a: ConvLayer,
    enc1b: ConvLayer,
    enc2a: ConvLayer,
    enc2b: ConvLayer,
    lat1: ConvLayer,
    lat0: ConvLayer,
    smooth1: ConvLayer,
    smooth0: ConvLayer,
}

impl Pyramid {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: PyramidConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, PyramidError> {
        let (c1, c2, c3) = (cfg.quarter_channels, cfg.half_channels, cfg.full_channels);
        if !(c1 > c2 && c2 > c3) {
            return Err(PyramidError::BadChannels(vec![c1, c2, c3]));
        }
        let g = cfg.init_gain;
        Ok(Pyramid {
            cfg,
            enc0a: ConvLayer::register(store, &format!("{prefix}.enc0a"), 3, c3, 3, 1, g, rng)?,
            enc0b: ConvLayer::register(store, &format!("{prefix}.enc0b"), c3, c3, 3, 1, g, rng)?,
            enc1a: ConvLayer::register(store, &format!("{prefix}.enc1a"), c3, c2, 3, 2, g, rng)?,
            enc1b: ConvLayer::register(store, &format!("{prefix}.enc1b"), c2, c2, 3, 1, g, rng)?,
            enc2a: ConvLayer::register(store, &format!("{prefix}.enc2a"), c2, c1, 3, 2, g, rng)?,
            enc2b: ConvLayer::register(store, &format!("{prefix}.enc2b"), c1, c1, 3, 1, g, rng)?,
            lat1: ConvLayer::register(store, &format!("{prefix}.lat1"), c1, c2, 1, 1, g, rng)?,
            lat0: ConvLayer::register(store, &format!("{prefix}.lat0"), c2, c3, 1, 1, g, rng)?,
            smooth1: ConvLayer::register(store, &format!("{prefix}.smooth1"), c2, c2, 3, 1, g, rng)?,
            smooth0: ConvLayer::register(store, &format!("{prefix}.smooth0"), c3, c3, 3, 1, g, rng)?,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    /// Extracts the three-stage pyramid from an `[H, W, 3]` image.
    pub fn extract(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: Var,
    ) -> Result<FeaturePyramid, PyramidError> {
        let shape = tape.shape(image).to_vec();
        let (h, w) = (shape[0], shape[1]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(PyramidError::BadSize {
                height: h,
                width: w,
            });
        }
        let act = |tape: &mut Tape, v: Var| tape.silu(v);

        let l0 = self.enc0a.forward(tape, bound, image)?;
        let l0 = act(tape, l0)?;
        let l0 = self.enc0b.forward(tape, bound, l0)?;
        let l0 = act(tape, l0)?;

        let l1 = self.enc1a.forward(tape, bound, l0)?;
        let l1 = act(tape, l1)?;
        let l1 = self.enc1b.forward(tape, bound, l1)?;
        let l1 = act(tape, l1)?;

        let l2 = self.enc2a.forward(tape, bound, l1)?;
        let l2 = act(tape, l2)?;
        let quarter = self.enc2b.forward(tape, bound, l2)?;

        // Top-down: project the coarse map into the finer stage's width and
        // add it onto the lateral features.
        let up1 = upsample_bilinear(tape, quarter, 2)?;
        let up1 = self.lat1.forward(tape, bound, up1)?;
        let half = tape.add(l1, up1)?;
        let half = self.smooth1.forward(tape, bound, half)?;

        let up0 = upsample_bilinear(tape, half, 2)?;
        let up0 = self.lat0.forward(tape, bound, up0)?;
        let full = tape.add(l0, up0)?;
        let full = self.smooth0.forward(tape, bound, full)?;

        Ok(FeaturePyramid {
            quarter,
            half,
            full,
        })
    }

    /// Receptive-field radius of the quarter-resolution features, in input
    /// pixels.
    pub fn quarter_receptive_radius(&self) -> usize {
        // (kernel, stride) chain feeding the quarter stage.
        let chain = [(3, 1), (3, 1), (3, 2), (3, 1), (3, 2), (3, 1)];
        let mut extent = 1usize;
        let mut jump = 1usize;
        for (k, s) in chain {
            extent += (k - 1) * jump;
            jump *= s;
        }
        extent / 2
    }
}
