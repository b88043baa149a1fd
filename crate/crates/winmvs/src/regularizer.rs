//! Cost-volume regularization into a per-pixel depth distribution.
//!
//! The main path is a 3D window-attention encoder–decoder: the volume is cut
//! into blocks and linearly embedded, the encoder alternates plain and
//! shifted 3D window attention with cell-merging downsampling, the decoder
//! restores resolution with learned cell expansion and fuses encoder
//! features through concatenate-then-linear skip connections, and a final
//! per-voxel projection plus softmax over depth yields the probability
//! volume. Baselines (no regularization, a shared per-slice 2D conv stack,
//! a small 3D U-Net) share the same contract for the ablation harness.

use crate::attention::{
    swin_block_pair, AttentionError, AttentionInit, AttentionParams, WindowSpec,
};
use crate::cost_volume::CostVolume;
use crate::grid::ValueGrid;
use crate::params::{normal_grid, BoundParams, ParamError, ParamId, ParamStore};
use crate::tape::{Tape, TapeResult, Var};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error(
        "volume {got:?} too small for {blocks} merges: needs at least {minimal:?} (D×H×W)"
    )]
    VolumeTooSmall {
        got: [usize; 3],
        minimal: [usize; 3],
        blocks: usize,
    },
    #[error("attention block count must be at least 1")]
    NoBlocks,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Transformer-regularizer hyperparameters.
#[derive(Clone, Debug)]
pub struct CtConfig {
    /// Block-embedding extents over (depth, height, width).
    pub block_extents: [usize; 3],
    /// Embedded channel count C'.
    pub embed_channels: usize,
    /// Number of encoder levels (attention pair + merge each).
    pub blocks: usize,
    /// 3D attention window (d_win, h_win, w_win).
    pub window: [usize; 3],
    pub head_dim: usize,
    /// Channels after the final de-embedding expansion.
    pub decode_channels: usize,
    /// Merge the depth axis alongside the spatial axes (symmetric
    /// encoder/decoder); spatial-only merging is the config alternative.
    pub merge_depth_axis: bool,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            block_extents: [2, 4, 4],
            embed_channels: 16,
            blocks: 3,
            window: [2, 8, 10],
            head_dim: 8,
            decode_channels: 8,
            merge_depth_axis: true,
        }
    }
}

impl CtConfig {
    fn merge_group(&self) -> [usize; 3] {
        if self.merge_depth_axis {
            [2, 2, 2]
        } else {
            [1, 2, 2]
        }
    }
}

struct CtLevel {
    attn_w: AttentionParams,
    attn_sw: AttentionParams,
    merge_w: ParamId,
    expand_w: ParamId,
    fuse_w: ParamId,
}

/// Learned weights of the transformer regularizer.
pub struct CtParams {
    pub cfg: CtConfig,
    in_channels: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    levels: Vec<CtLevel>,
    deembed_w: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl CtParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: CtConfig,
        in_channels: usize,
        init: &AttentionInit,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, RegularizerError> {
        if cfg.blocks == 0 {
            return Err(RegularizerError::NoBlocks);
        }
        let block_cells: usize = cfg.block_extents.iter().product();
        let c0 = cfg.embed_channels;
        let embed_w = store.register(
            &format!("{prefix}.embed.w"),
            normal_grid(rng, &[block_cells * in_channels, c0], init.proj_std),
        )?;
        let embed_b = store.register(&format!("{prefix}.embed.b"), ValueGrid::zeros(&[c0]))?;
        let group: usize = cfg.merge_group().iter().product();
        let mut levels = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let c = c0 << i;
            let heads = (c / cfg.head_dim).max(1);
            let attn_w = AttentionParams::register(
                store,
                &format!("{prefix}.lvl{i}.w"),
                c,
                heads,
                &cfg.window,
                init,
                rng,
            )?;
            let attn_sw = AttentionParams::register(
                store,
                &format!("{prefix}.lvl{i}.sw"),
                c,
                heads,
                &cfg.window,
                init,
                rng,
            )?;
            let merge_w = store.register(
                &format!("{prefix}.lvl{i}.merge"),
                normal_grid(rng, &[group * c, 2 * c], init.proj_std),
            )?;
            let expand_w = store.register(
                &format!("{prefix}.lvl{i}.expand"),
                normal_grid(rng, &[2 * c, group * c], init.proj_std),
            )?;
            let fuse_w = store.register(
                &format!("{prefix}.lvl{i}.fuse"),
                normal_grid(rng, &[2 * c, c], init.proj_std),
            )?;
            levels.push(CtLevel {
                attn_w,
                attn_sw,
                merge_w,
                expand_w,
                fuse_w,
            });
        }
        let deembed_w = store.register(
            &format!("{prefix}.deembed.w"),
            normal_grid(
                rng,
                &[c0, block_cells * cfg.decode_channels],
                init.proj_std,
            ),
        )?;
        let out_w = store.register(
            &format!("{prefix}.out.w"),
            normal_grid(rng, &[cfg.decode_channels, 1], init.proj_std),
        )?;
        let out_b = store.register(&format!("{prefix}.out.b"), ValueGrid::zeros(&[1]))?;
        Ok(CtParams {
            cfg,
            in_channels,
            embed_w,
            embed_b,
            levels,
            deembed_w,
            out_w,
            out_b,
        })
    }
}

/// Gathers non-overlapping cell groups of `group` into the channel axis:
/// `[d, h, w, c] → [⌈d/gd⌉, ⌈h/gh⌉, ⌈w/gw⌉, gd·gh·gw·c]`, padding with
/// zeros where the group hangs over the edge.
fn merge_cells(
    tape: &mut Tape,
    x: Var,
    group: [usize; 3],
) -> TapeResult<Var> {
    let s = tape.shape(x).to_vec();
    let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
    let od = d.div_ceil(group[0]);
    let oh = h.div_ceil(group[1]);
    let ow = w.div_ceil(group[2]);
    let cells: usize = group.iter().product();
    let flat = tape.reshape(x, &[d * h * w * c])?;
    let zero = tape.constant(ValueGrid::zeros(&[1]));
    let ext = tape.concat(flat, zero, 0)?;
    let zero_slot = d * h * w * c;
    let mut idx = Vec::with_capacity(od * oh * ow * cells * c);
    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                for gz in 0..group[0] {
                    for gy in 0..group[1] {
                        for gx in 0..group[2] {
                            let z = oz * group[0] + gz;
                            let y = oy * group[1] + gy;
                            let xx = ox * group[2] + gx;
                            let real = z < d && y < h && xx < w;
                            let base = ((z * h + y) * w + xx) * c;
                            for ch in 0..c {
                                idx.push(if real { base + ch } else { zero_slot });
                            }
                        }
                    }
                }
            }
        }
    }
    tape.gather(ext, Rc::new(idx), &[od, oh, ow, cells * c])
}

/// Inverse of [`merge_cells`]: spreads grouped channels back over the cell
/// positions and crops to `out_dims`.
fn expand_cells(
    tape: &mut Tape,
    x: Var,
    group: [usize; 3],
    out_dims: [usize; 3],
    c_out: usize,
) -> TapeResult<Var> {
    let s = tape.shape(x).to_vec();
    let (d, h, w) = (s[0], s[1], s[2]);
    debug_assert_eq!(s[3], group.iter().product::<usize>() * c_out);
    let flat = tape.reshape(x, &[d * h * w * s[3]])?;
    let mut idx = Vec::with_capacity(out_dims.iter().product::<usize>() * c_out);
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for xx in 0..out_dims[2] {
                let (oz, gz) = (z / group[0], z % group[0]);
                let (oy, gy) = (y / group[1], y % group[1]);
                let (ox, gx) = (xx / group[2], xx % group[2]);
                debug_assert!(oz < d && oy < h && ox < w);
                let cell = (gz * group[1] + gy) * group[2] + gx;
                let base = (((oz * h + oy) * w + ox) * s[3]) + cell * c_out;
                for ch in 0..c_out {
                    idx.push(base + ch);
                }
            }
        }
    }
    tape.gather(
        flat,
        Rc::new(idx),
        &[out_dims[0], out_dims[1], out_dims[2], c_out],
    )
}

fn linear_lastdim(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> TapeResult<Var> {
    let s = tape.shape(x).to_vec();
    let rows: usize = s[..s.len() - 1].iter().product();
    let c_in = s[s.len() - 1];
    let c_out = tape.shape(w)[1];
    let flat = tape.reshape(x, &[rows, c_in])?;
    let y = tape.linear(flat, w, b)?;
    let mut out_shape = s[..s.len() - 1].to_vec();
    out_shape.push(c_out);
    tape.reshape(y, &out_shape)
}

/// Runs the transformer regularizer over a cost volume and returns the
/// probability volume `[H, W, D]` (softmax along depth at every pixel).
pub fn ct_regularize(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &CtParams,
    volume: &CostVolume,
) -> Result<Var, RegularizerError> {
    let cfg = &params.cfg;
    let (h, w, g, d) = (
        volume.height,
        volume.width,
        volume.groups,
        volume.depths,
    );
    debug_assert_eq!(g, params.in_channels);

    // Minimal size: every embedded axis must survive the merges.
    let be = cfg.block_extents;
    let embedded = [d.div_ceil(be[0]), h.div_ceil(be[1]), w.div_ceil(be[2])];
    let need = 1usize << (cfg.blocks - 1);
    let grp = cfg.merge_group();
    for ax in 0..3 {
        let need_ax = if grp[ax] == 1 { 1 } else { need };
        if embedded[ax] < need_ax {
            return Err(RegularizerError::VolumeTooSmall {
                got: [d, h, w],
                minimal: [
                    be[0] * if grp[0] == 1 { 1 } else { need },
                    be[1] * if grp[1] == 1 { 1 } else { need },
                    be[2] * if grp[2] == 1 { 1 } else { need },
                ],
                blocks: cfg.blocks,
            });
        }
    }

    // [H, W, G, D] → [D, H, W, G], then block embedding.
    let vol = tape.permute(volume.var, &[3, 0, 1, 2])?;
    let blocks = merge_cells(tape, vol, be)?;
    let embed_w = bound.var(params.embed_w);
    let embed_b = bound.var(params.embed_b);
    let mut x = linear_lastdim(tape, blocks, embed_w, Some(embed_b))?;

    // Encoder with skip taps.
    let spec = WindowSpec::flat(&cfg.window).expect("validated extents");
    let mut dims = embedded;
    let mut skips: Vec<(Var, [usize; 3])> = Vec::with_capacity(cfg.blocks);
    for level in &params.levels {
        x = swin_block_pair(tape, bound, &level.attn_w, &level.attn_sw, x, &spec)?;
        skips.push((x, dims));
        x = merge_cells(tape, x, grp)?;
        let merge_w = bound.var(level.merge_w);
        x = linear_lastdim(tape, x, merge_w, None)?;
        dims = [
            dims[0].div_ceil(grp[0]),
            dims[1].div_ceil(grp[1]),
            dims[2].div_ceil(grp[2]),
        ];
    }

    // Decoder: expand, concatenate the skip, fuse.
    for (level, (skip, skip_dims)) in params.levels.iter().zip(skips.iter()).rev() {
        let expand_w = bound.var(level.expand_w);
        let spread = linear_lastdim(tape, x, expand_w, None)?;
        let c_here = tape.shape(*skip)[3];
        let up = expand_cells(tape, spread, grp, *skip_dims, c_here)?;
        let cat = tape.concat(up, *skip, 3)?;
        let fuse_w = bound.var(level.fuse_w);
        x = linear_lastdim(tape, cat, fuse_w, None)?;
    }

    // De-embed back to the volume resolution and project to one logit per
    // voxel.
    let deembed_w = bound.var(params.deembed_w);
    let spread = linear_lastdim(tape, x, deembed_w, None)?;
    let full = expand_cells(tape, spread, be, [d, h, w], cfg.decode_channels)?;
    let out_w = bound.var(params.out_w);
    let out_b = bound.var(params.out_b);
    let logits = linear_lastdim(tape, full, out_w, Some(out_b))?;
    let logits = tape.reshape(logits, &[d, h, w])?;
    let logits = tape.permute(logits, &[1, 2, 0])?;
    Ok(tape.softmax_lastdim(logits, None)?)
}

// ── Baseline regularizers ───────────────────────────────────────────────

/// Zero-padded 3D convolution as an im2col gather plus a matrix product.
struct Conv3dLayer {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
}

impl Conv3dLayer {
    fn register(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ParamError> {
        let fan_in = (kernel * kernel * kernel * c_in) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = store.register(
            &format!("{name}.w"),
            normal_grid(rng, &[kernel * kernel * kernel * c_in, c_out], std),
        )?;
        let b = store.register(&format!("{name}.b"), ValueGrid::zeros(&[c_out]))?;
        Ok(Conv3dLayer {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> TapeResult<Var> {
        let s = tape.shape(x).to_vec();
        let (d, h, w) = (s[0], s[1], s[2]);
        debug_assert_eq!(s[3], self.c_in);
        let od = (d - 1) / self.stride + 1;
        let oh = (h - 1) / self.stride + 1;
        let ow = (w - 1) / self.stride + 1;
        let k = self.kernel as isize;
        let half = k / 2;
        let flat = tape.reshape(x, &[d * h * w * self.c_in])?;
        let zero = tape.constant(ValueGrid::zeros(&[1]));
        let ext = tape.concat(flat, zero, 0)?;
        let zero_slot = d * h * w * self.c_in;
        let mut idx =
            Vec::with_capacity(od * oh * ow * (self.kernel.pow(3)) * self.c_in);
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    for kz in 0..k {
                        for ky in 0..k {
                            for kx in 0..k {
                                let z = (oz * self.stride) as isize + kz - half;
                                let y = (oy * self.stride) as isize + ky - half;
                                let xx = (ox * self.stride) as isize + kx - half;
                                let real = z >= 0
                                    && y >= 0
                                    && xx >= 0
                                    && (z as usize) < d
                                    && (y as usize) < h
                                    && (xx as usize) < w;
                                let base = if real {
                                    ((z as usize * h + y as usize) * w + xx as usize)
                                        * self.c_in
                                } else {
                                    zero_slot
                                };
                                for ch in 0..self.c_in {
                                    idx.push(if real { base + ch } else { zero_slot });
                                }
                            }
                        }
                    }
                }
            }
        }
        let cols = tape.gather(
            ext,
            Rc::new(idx),
            &[od * oh * ow, self.kernel.pow(3) * self.c_in],
        )?;
        let y = tape.linear(cols, bound.var(self.w), Some(bound.var(self.b)))?;
        tape.reshape(y, &[od, oh, ow, self.c_out])
    }
}

/// Shared-weight 2D conv stack applied to every depth slice.
pub struct Conv2dReg {
    c1: crate::fpn::ConvLayer,
    c2: crate::fpn::ConvLayer,
    c3: crate::fpn::ConvLayer,
}

impl Conv2dReg {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ParamError> {
        Ok(Conv2dReg {
            c1: crate::fpn::ConvLayer::register(
                store,
                &format!("{prefix}.c1"),
                in_channels,
                width,
                3,
                1,
                1.0,
                rng,
            )?,
            c2: crate::fpn::ConvLayer::register(
                store,
                &format!("{prefix}.c2"),
                width,
                width,
                3,
                1,
                1.0,
                rng,
            )?,
            c3: crate::fpn::ConvLayer::register(
                store,
                &format!("{prefix}.c3"),
                width,
                1,
                3,
                1,
                1.0,
                rng,
            )?,
        })
    }

    fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        volume: &CostVolume,
    ) -> TapeResult<Var> {
        let (h, w, g, d) = (
            volume.height,
            volume.width,
            volume.groups,
            volume.depths,
        );
        // [H, W, G, D] → [D, H, W, G], then each depth slice through the
        // shared stack.
        let vol = tape.permute(volume.var, &[3, 0, 1, 2])?;
        let flat = tape.reshape(vol, &[d * h * w * g])?;
        let mut logits: Option<Var> = None;
        for di in 0..d {
            let idx: Vec<usize> = (di * h * w * g..(di + 1) * h * w * g).collect();
            let slice = tape.gather(flat, Rc::new(idx), &[h, w, g])?;
            let x = self.c1.forward(tape, bound, slice)?;
            let x = tape.silu(x)?;
            let x = self.c2.forward(tape, bound, x)?;
            let x = tape.silu(x)?;
            let x = self.c3.forward(tape, bound, x)?;
            let x = tape.reshape(x, &[1, h, w])?;
            logits = Some(match logits {
                Some(acc) => tape.concat(acc, x, 0)?,
                None => x,
            });
        }
        let logits = logits.expect("at least one depth");
        let logits = tape.permute(logits, &[1, 2, 0])?;
        tape.softmax_lastdim(logits, None)
    }
}

/// Two-level 3D U-Net.
pub struct Conv3dReg {
    enc1: Conv3dLayer,
    enc2: Conv3dLayer,
    down: Conv3dLayer,
    mid: Conv3dLayer,
    up_w: ParamId,
    fuse: Conv3dLayer,
    out: Conv3dLayer,
}

impl Conv3dReg {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ParamError> {
        let up_w = store.register(
            &format!("{prefix}.up.w"),
            normal_grid(rng, &[2 * width, 8 * width], (1.0 / (2.0 * width as f64)).sqrt()),
        )?;
        Ok(Conv3dReg {
            enc1: Conv3dLayer::register(store, &format!("{prefix}.enc1"), in_channels, width, 3, 1, rng)?,
            enc2: Conv3dLayer::register(store, &format!("{prefix}.enc2"), width, width, 3, 1, rng)?,
            down: Conv3dLayer::register(store, &format!("{prefix}.down"), width, 2 * width, 3, 2, rng)?,
            mid: Conv3dLayer::register(store, &format!("{prefix}.mid"), 2 * width, 2 * width, 3, 1, rng)?,
            up_w,
            fuse: Conv3dLayer::register(store, &format!("{prefix}.fuse"), 2 * width, width, 1, 1, rng)?,
            out: Conv3dLayer::register(store, &format!("{prefix}.out"), width, 1, 3, 1, rng)?,
        })
    }

    fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        volume: &CostVolume,
    ) -> TapeResult<Var> {
        let (h, w, d) = (volume.height, volume.width, volume.depths);
        let vol = tape.permute(volume.var, &[3, 0, 1, 2])?;
        let x = self.enc1.forward(tape, bound, vol)?;
        let x = tape.silu(x)?;
        let skip = self.enc2.forward(tape, bound, x)?;
        let skip = tape.silu(skip)?;
        let x = self.down.forward(tape, bound, skip)?;
        let x = tape.silu(x)?;
        let x = self.mid.forward(tape, bound, x)?;
        let x = tape.silu(x)?;
        let width = tape.shape(skip)[3];
        let spread = linear_lastdim(tape, x, bound.var(self.up_w), None)?;
        let up = expand_cells(tape, spread, [2, 2, 2], [d, h, w], width)?;
        let cat = tape.concat(up, skip, 3)?;
        let x = self.fuse.forward(tape, bound, cat)?;
        let x = tape.silu(x)?;
        let logits = self.out.forward(tape, bound, x)?;
        let logits = tape.reshape(logits, &[d, h, w])?;
        let logits = tape.permute(logits, &[1, 2, 0])?;
        tape.softmax_lastdim(logits, None)
    }
}

/// Which regularizer processes the cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegKind {
    None,
    Conv2d,
    Conv3d,
    Transformer,
}

impl RegKind {
    pub fn parse(s: &str) -> Option<RegKind> {
        match s {
            "none" => Some(RegKind::None),
            "conv2d" => Some(RegKind::Conv2d),
            "conv3d" => Some(RegKind::Conv3d),
            "ct" => Some(RegKind::Transformer),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Conv2d => "conv2d",
            RegKind::Conv3d => "conv3d",
            RegKind::Transformer => "ct",
        }
    }
}

/// A registered regularizer of any kind, behind one `apply` contract.
pub enum Regularizer {
    None,
    Conv2d(Conv2dReg),
    Conv3d(Conv3dReg),
    Transformer(Box<CtParams>),
}

impl Regularizer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        kind: RegKind,
        in_channels: usize,
        ct_cfg: &CtConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, RegularizerError> {
        Ok(match kind {
            RegKind::None => Regularizer::None,
            RegKind::Conv2d => {
                Regularizer::Conv2d(Conv2dReg::register(store, prefix, in_channels, 8, rng)?)
            }
            RegKind::Conv3d => {
                Regularizer::Conv3d(Conv3dReg::register(store, prefix, in_channels, 8, rng)?)
            }
            RegKind::Transformer => Regularizer::Transformer(Box::new(CtParams::register(
                store,
                prefix,
                ct_cfg.clone(),
                in_channels,
                &AttentionInit::default(),
                rng,
            )?)),
        })
    }

    /// Normalized probability volume `[H, W, D]` for the cost volume.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        volume: &CostVolume,
    ) -> Result<Var, RegularizerError> {
        match self {
            Regularizer::None => {
                let mean = tape.sum_axis(volume.var, 2)?;
                let mean = tape.scale(mean, 1.0 / volume.groups as f64);
                Ok(tape.softmax_lastdim(mean, None)?)
            }
            Regularizer::Conv2d(reg) => Ok(reg.apply(tape, bound, volume)?),
            Regularizer::Conv3d(reg) => Ok(reg.apply(tape, bound, volume)?),
            Regularizer::Transformer(params) => ct_regularize(tape, bound, params, volume),
        }
    }
}
