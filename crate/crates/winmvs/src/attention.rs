//! Window multi-head attention in two and three dimensions.
//!
//! A grid is partitioned into non-overlapping windows, each window attends
//! over its own tokens (`softmax(QKᵀ/√d + B)·V` with a relative position
//! bias table `B`), and the windows are reassembled bit-exactly. A cyclic
//! shift before partitioning, combined with an attention mask that forbids
//! attention between cells that were not neighbors before the roll, lets
//! information cross window boundaries on alternating blocks.
//!
//! The same machinery serves the 2D per-view blocks, the cross-view
//! epipolar attention (which supplies its own token sets) and the 3D
//! cost-volume blocks.

use crate::grid::ValueGrid;
use crate::params::{normal_grid, BoundParams, ParamError, ParamId, ParamStore};
use crate::tape::{Tape, TapeResult, Var};
use std::rc::Rc;
use thiserror::Error;

/// Additive logit penalty for masked attention pairs. Large enough that the
/// post-softmax weight underflows to exactly zero.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("window extents {0:?} must all be at least 1")]
    BadExtents(Vec<usize>),
    #[error("shift {shift:?} must be below the extents {extents:?}")]
    BadShift {
        shift: Vec<usize>,
        extents: Vec<usize>,
    },
    #[error("channel count {channels} is not heads {heads} × head_dim {head_dim}")]
    HeadSplit {
        channels: usize,
        heads: usize,
        head_dim: usize,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Window geometry: per-axis extents and cyclic pre-partition shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub extents: Vec<usize>,
    pub shift: Vec<usize>,
}

impl WindowSpec {
    pub fn flat(extents: &[usize]) -> Result<Self, AttentionError> {
        Self::new(extents, &vec![0; extents.len()])
    }

    /// Shifted by half the extent on every axis (rounded down).
    pub fn half_shifted(extents: &[usize]) -> Result<Self, AttentionError> {
        let shift: Vec<usize> = extents.iter().map(|e| e / 2).collect();
        Self::new(extents, &shift)
    }

    pub fn new(extents: &[usize], shift: &[usize]) -> Result<Self, AttentionError> {
        if extents.is_empty() || extents.iter().any(|&e| e == 0) {
            return Err(AttentionError::BadExtents(extents.to_vec()));
        }
        if shift.len() != extents.len() || shift.iter().zip(extents).any(|(&s, &e)| s >= e) {
            return Err(AttentionError::BadShift {
                shift: shift.to_vec(),
                extents: extents.to_vec(),
            });
        }
        Ok(WindowSpec {
            extents: extents.to_vec(),
            shift: shift.to_vec(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s != 0)
    }
}

/// Host-side partition plan for one grid shape and window spec: the padded
/// dimensions, the cell↔slot index map, key validity and the combined
/// pad/shift attention mask.
pub struct WindowPlan {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub padded: Vec<usize>,
    pub spec: WindowSpec,
    pub n_windows: usize,
    pub tokens: usize,
    cell_to_slot: Rc<Vec<usize>>,
    key_valid: Vec<bool>,
    attn_mask: Option<ValueGrid>,
    bias_offsets: Rc<Vec<usize>>,
}

impl WindowPlan {
    pub fn new(dims: &[usize], channels: usize, spec: &WindowSpec) -> Self {
        assert_eq!(dims.len(), spec.extents.len(), "spec rank must match grid rank");
        let padded: Vec<usize> = dims
            .iter()
            .zip(&spec.extents)
            .map(|(&d, &e)| d.div_ceil(e) * e)
            .collect();
        let wins_per_axis: Vec<usize> = padded
            .iter()
            .zip(&spec.extents)
            .map(|(&p, &e)| p / e)
            .collect();
        let n_windows: usize = wins_per_axis.iter().product();
        let tokens = spec.tokens();

        // Map each real cell (after the cyclic roll) to its window slot.
        let n_cells: usize = dims.iter().product();
        let mut cell_to_slot = Vec::with_capacity(n_cells * channels);
        let mut key_valid = vec![false; n_windows * tokens];
        let mut coord = vec![0usize; dims.len()];
        for _ in 0..n_cells {
            let mut w = 0usize;
            let mut t = 0usize;
            for ax in 0..dims.len() {
                let rolled = (coord[ax] + padded[ax] - spec.shift[ax]) % padded[ax];
                w = w * wins_per_axis[ax] + rolled / spec.extents[ax];
                t = t * spec.extents[ax] + rolled % spec.extents[ax];
            }
            let slot = w * tokens + t;
            key_valid[slot] = true;
            for ch in 0..channels {
                cell_to_slot.push(slot * channels + ch);
            }
            for ax in (0..dims.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < dims[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }

        // Region labels on the padded grid: per axis the three slices
        // [0, L−e), [L−e, L−s), [L−s, L). Tokens from different regions were
        // not neighbors before the roll and must not attend to each other.
        let shifted = spec.is_shifted();
        let any_pad = padded != dims;
        let attn_mask = if shifted || any_pad {
            // Precompute per-slot region ids and real-cell flags.
            let n_axes = dims.len();
            let mut slot_region = vec![0usize; n_windows * tokens];
            let mut slot_real = vec![true; n_windows * tokens];
            let mut w_digits = vec![0usize; n_axes];
            let mut t_digits = vec![0usize; n_axes];
            for w in 0..n_windows {
                let mut w_rem = w;
                for ax in (0..n_axes).rev() {
                    w_digits[ax] = w_rem % wins_per_axis[ax];
                    w_rem /= wins_per_axis[ax];
                }
                for t in 0..tokens {
                    let mut t_rem = t;
                    for ax in (0..n_axes).rev() {
                        t_digits[ax] = t_rem % spec.extents[ax];
                        t_rem /= spec.extents[ax];
                    }
                    let mut region = 0usize;
                    let mut real = true;
                    for ax in 0..n_axes {
                        let pos = w_digits[ax] * spec.extents[ax] + t_digits[ax];
                        let l = padded[ax];
                        let e = spec.extents[ax];
                        let s = spec.shift[ax];
                        let r = if pos < l - e {
                            0
                        } else if pos < l - s {
                            1
                        } else {
                            2
                        };
                        region = region * 3 + r;
                        // Un-roll to test whether this slot holds a real cell.
                        let orig = (pos + s) % l;
                        if orig >= dims[ax] {
                            real = false;
                        }
                    }
                    slot_region[w * tokens + t] = region;
                    slot_real[w * tokens + t] = real;
                }
            }
            let mut mask = vec![0.0f64; n_windows * tokens * tokens];
            for w in 0..n_windows {
                let regions = &slot_region[w * tokens..(w + 1) * tokens];
                let real = &slot_real[w * tokens..(w + 1) * tokens];
                for t1 in 0..tokens {
                    let row = &mut mask[(w * tokens + t1) * tokens..(w * tokens + t1 + 1) * tokens];
                    for t2 in 0..tokens {
                        let blocked = !real[t2] || (shifted && regions[t1] != regions[t2]);
                        if blocked {
                            row[t2] = MASKED_LOGIT;
                        }
                    }
                }
            }
            Some(
                ValueGrid::from_vec(&[n_windows, tokens, tokens], mask)
                    .expect("mask dimensions"),
            )
        } else {
            None
        };

        // Relative position bias offsets per token pair.
        let n_axes = dims.len();
        let mut bias_offsets = Vec::with_capacity(tokens * tokens);
        let decode = |mut t: usize| -> Vec<usize> {
            let mut digits = vec![0usize; n_axes];
            for ax in (0..n_axes).rev() {
                digits[ax] = t % spec.extents[ax];
                t /= spec.extents[ax];
            }
            digits
        };
        let token_coords: Vec<Vec<usize>> = (0..tokens).map(decode).collect();
        for t1 in 0..tokens {
            for t2 in 0..tokens {
                let mut idx = 0usize;
                for ax in 0..n_axes {
                    let delta =
                        token_coords[t1][ax] as isize - token_coords[t2][ax] as isize;
                    let shifted_delta = (delta + spec.extents[ax] as isize - 1) as usize;
                    idx = idx * (2 * spec.extents[ax] - 1) + shifted_delta;
                }
                bias_offsets.push(idx);
            }
        }

        WindowPlan {
            dims: dims.to_vec(),
            channels,
            padded,
            spec: spec.clone(),
            n_windows,
            tokens,
            cell_to_slot: Rc::new(cell_to_slot),
            key_valid,
            attn_mask,
            bias_offsets: Rc::new(bias_offsets),
        }
    }

    /// Number of distinct relative offsets inside one window.
    pub fn bias_entries(&self) -> usize {
        self.spec.extents.iter().map(|&e| 2 * e - 1).product()
    }

    pub fn key_valid(&self) -> &[bool] {
        &self.key_valid
    }

    pub fn mask_grid(&self) -> Option<&ValueGrid> {
        self.attn_mask.as_ref()
    }
}

/// Number of relative-offset bias entries for a window with these extents.
pub fn bias_table_entries(extents: &[usize]) -> usize {
    extents.iter().map(|&e| 2 * e - 1).product()
}

/// Splits a grid `[dims…, C]` into window tokens `[W, T, C]`. Padded slots
/// are zero. The inverse gather reassembles the grid bit-exactly.
pub fn partition_windows(tape: &mut Tape, grid: Var, plan: &WindowPlan) -> TapeResult<Var> {
    let flat_len: usize = plan.dims.iter().product::<usize>() * plan.channels;
    let flat = tape.reshape(grid, &[flat_len])?;
    tape.scatter(
        flat,
        plan.cell_to_slot.clone(),
        &[plan.n_windows, plan.tokens, plan.channels],
    )
}

/// Inverse of [`partition_windows`].
pub fn unpartition_windows(tape: &mut Tape, windows: Var, plan: &WindowPlan) -> TapeResult<Var> {
    let total = plan.n_windows * plan.tokens * plan.channels;
    let flat = tape.reshape(windows, &[total])?;
    let mut out_shape = plan.dims.clone();
    out_shape.push(plan.channels);
    tape.gather(flat, plan.cell_to_slot.clone(), &out_shape)
}

/// Learned weights of one attention block: QKVO projections, relative
/// position bias table, the two layer norms and the MLP.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub bias_table: ParamId,
    pub norm1_scale: ParamId,
    pub norm1_offset: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_offset: ParamId,
    /// Adds the relative position bias inside the window attention. On for
    /// self-attention; cross-view attention keeps a same-shape table that
    /// can be toggled off.
    pub use_position_bias: bool,
}

/// Weight-initialization knobs shared by all attention blocks.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInit {
    pub proj_std: f64,
    /// Standard deviation for the bias table; zero keeps the uniform-softmax
    /// behavior exact at initialization.
    pub bias_table_std: f64,
    pub mlp_expansion: usize,
}

impl Default for AttentionInit {
    fn default() -> Self {
        AttentionInit {
            proj_std: 0.02,
            bias_table_std: 0.0,
            mlp_expansion: 4,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        window_extents: &[usize],
        init: &AttentionInit,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, AttentionError> {
        if heads == 0 || channels % heads != 0 {
            return Err(AttentionError::HeadSplit {
                channels,
                heads,
                head_dim: if heads == 0 { 0 } else { channels / heads },
            });
        }
        let head_dim = channels / heads;
        let hidden = channels * init.mlp_expansion;
        let entries = bias_table_entries(window_extents);
        let mut reg = |name: String, grid: ValueGrid| store.register(&name, grid);
        let wq = reg(format!("{prefix}.wq"), normal_grid(rng, &[channels, channels], init.proj_std))?;
        let bq = reg(format!("{prefix}.bq"), ValueGrid::zeros(&[channels]))?;
        let wk = reg(format!("{prefix}.wk"), normal_grid(rng, &[channels, channels], init.proj_std))?;
        let bk = reg(format!("{prefix}.bk"), ValueGrid::zeros(&[channels]))?;
        let wv = reg(format!("{prefix}.wv"), normal_grid(rng, &[channels, channels], init.proj_std))?;
        let bv = reg(format!("{prefix}.bv"), ValueGrid::zeros(&[channels]))?;
        let wo = reg(format!("{prefix}.wo"), normal_grid(rng, &[channels, channels], init.proj_std))?;
        let bo = reg(format!("{prefix}.bo"), ValueGrid::zeros(&[channels]))?;
        let bias_table = reg(
            format!("{prefix}.bias_table"),
            if init.bias_table_std == 0.0 {
                ValueGrid::zeros(&[entries, heads])
            } else {
                normal_grid(rng, &[entries, heads], init.bias_table_std)
            },
        )?;
        let norm1_scale = reg(format!("{prefix}.norm1.scale"), ValueGrid::filled(&[channels], 1.0))?;
        let norm1_offset = reg(format!("{prefix}.norm1.offset"), ValueGrid::zeros(&[channels]))?;
        let mlp_w1 = reg(format!("{prefix}.mlp.w1"), normal_grid(rng, &[channels, hidden], init.proj_std))?;
        let mlp_b1 = reg(format!("{prefix}.mlp.b1"), ValueGrid::zeros(&[hidden]))?;
        let mlp_w2 = reg(format!("{prefix}.mlp.w2"), normal_grid(rng, &[hidden, channels], init.proj_std))?;
        let mlp_b2 = reg(format!("{prefix}.mlp.b2"), ValueGrid::zeros(&[channels]))?;
        let norm2_scale = reg(format!("{prefix}.norm2.scale"), ValueGrid::filled(&[channels], 1.0))?;
        let norm2_offset = reg(format!("{prefix}.norm2.offset"), ValueGrid::zeros(&[channels]))?;
        Ok(AttentionParams {
            channels,
            heads,
            head_dim,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            bias_table,
            norm1_scale,
            norm1_offset,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            norm2_scale,
            norm2_offset,
            use_position_bias: true,
        })
    }
}

pub struct AttentionOutput {
    pub tokens: Var,
    /// Softmax weights `[W, heads, T_q, T_k]`, exposed for mask checks.
    pub weights: Var,
}

/// Scaled dot-product window attention: queries from `queries`, keys and
/// values from `keys_values` (or `queries` itself for self-attention), an
/// optional additive mask `[W, T_q, T_k]` and the relative position bias.
pub fn window_attention(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &AttentionParams,
    queries: Var,
    keys_values: Option<Var>,
    mask: Option<&ValueGrid>,
    bias_offsets: Option<&Rc<Vec<usize>>>,
) -> TapeResult<AttentionOutput> {
    let q_shape = tape.shape(queries).to_vec();
    let (w, tq, c) = (q_shape[0], q_shape[1], q_shape[2]);
    let kv = keys_values.unwrap_or(queries);
    let kv_shape = tape.shape(kv).to_vec();
    let tk = kv_shape[1];
    let heads = params.heads;
    let hd = params.head_dim;

    let project = |tape: &mut Tape, x: Var, tokens: usize, wp: ParamId, bp: ParamId| -> TapeResult<Var> {
        let flat = tape.reshape(x, &[w * tokens, c])?;
        let y = tape.linear(flat, bound.var(wp), Some(bound.var(bp)))?;
        let y = tape.reshape(y, &[w, tokens, heads, hd])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = project(tape, queries, tq, params.wq, params.bq)?;
    let k = project(tape, kv, tk, params.wk, params.bk)?;
    let v = project(tape, kv, tk, params.wv, params.bv)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());

    if params.use_position_bias {
        if let Some(offsets) = bias_offsets {
            debug_assert_eq!(offsets.len(), tq * tk);
            let table = bound.var(params.bias_table);
            let entries = tape.shape(table)[0];
            let flat_table = tape.reshape(table, &[entries * heads])?;
            let mut idx = Vec::with_capacity(heads * tq * tk);
            for h in 0..heads {
                for &off in offsets.iter() {
                    idx.push(off * heads + h);
                }
            }
            let bias = tape.gather(flat_table, Rc::new(idx), &[heads, tq, tk])?;
            scores = tape.add_broadcast(scores, bias, &[1, heads, tq, tk])?;
        }
    }

    if let Some(mask) = mask {
        let m = tape.constant(mask.clone());
        scores = tape.add_broadcast(scores, m, &[w, 1, tq, tk])?;
    }

    let weights = tape.softmax_lastdim(scores, None)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[w * tq, c])?;
    let out = tape.linear(ctx, bound.var(params.wo), Some(bound.var(params.bo)))?;
    let tokens = tape.reshape(out, &[w, tq, c])?;
    Ok(AttentionOutput { tokens, weights })
}

/// Pre-norm transformer block over window tokens:
/// `ẑ = Attn(LN(z)) + z`, `out = MLP(LN(ẑ)) + ẑ`.
///
/// For cross-attention the key/value stream is normalized with the same
/// first layer norm before entering the attention.
pub fn attention_block_tokens(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &AttentionParams,
    tokens: Var,
    keys_values: Option<Var>,
    mask: Option<&ValueGrid>,
    bias_offsets: Option<&Rc<Vec<usize>>>,
) -> TapeResult<Var> {
    let n1s = bound.var(params.norm1_scale);
    let n1o = bound.var(params.norm1_offset);
    let normed_q = tape.layer_norm_lastdim(tokens, n1s, n1o, LAYER_NORM_EPS)?;
    let normed_kv = match keys_values {
        Some(kv) => Some(tape.layer_norm_lastdim(kv, n1s, n1o, LAYER_NORM_EPS)?),
        None => None,
    };
    let attn = window_attention(tape, bound, params, normed_q, normed_kv, mask, bias_offsets)?;
    let z = tape.add(attn.tokens, tokens)?;

    let shape = tape.shape(z).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let c = shape[shape.len() - 1];
    let normed = tape.layer_norm_lastdim(
        z,
        bound.var(params.norm2_scale),
        bound.var(params.norm2_offset),
        LAYER_NORM_EPS,
    )?;
    let flat = tape.reshape(normed, &[rows, c])?;
    let h = tape.linear(flat, bound.var(params.mlp_w1), Some(bound.var(params.mlp_b1)))?;
    let h = tape.silu(h)?;
    let out = tape.linear(h, bound.var(params.mlp_w2), Some(bound.var(params.mlp_b2)))?;
    let out = tape.reshape(out, &shape)?;
    tape.add(out, z)
}

/// One windowed attention block applied to a spatial grid `[dims…, C]`.
pub fn swin_block(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &AttentionParams,
    grid: Var,
    plan: &WindowPlan,
) -> TapeResult<Var> {
    let windows = partition_windows(tape, grid, plan)?;
    let out = attention_block_tokens(
        tape,
        bound,
        params,
        windows,
        None,
        plan.mask_grid(),
        Some(&plan.bias_offsets),
    )?;
    unpartition_windows(tape, out, plan)
}

/// The canonical pair: an unshifted window block followed by a block whose
/// windows are cyclically shifted by half the extent per axis.
pub fn swin_block_pair(
    tape: &mut Tape,
    bound: &BoundParams,
    params_l: &AttentionParams,
    params_l1: &AttentionParams,
    grid: Var,
    spec: &WindowSpec,
) -> TapeResult<Var> {
    let dims = {
        let s = tape.shape(grid);
        s[..s.len() - 1].to_vec()
    };
    let channels = *tape.shape(grid).last().expect("grid has channels");
    let flat_spec = WindowSpec::flat(&spec.extents).expect("extents already validated");
    let shifted_spec = if spec.is_shifted() {
        spec.clone()
    } else {
        WindowSpec::half_shifted(&spec.extents).expect("extents already validated")
    };
    let plan_flat = WindowPlan::new(&dims, channels, &flat_spec);
    let z = swin_block(tape, bound, params_l, grid, &plan_flat)?;
    let plan_shift = WindowPlan::new(&dims, channels, &shifted_spec);
    swin_block(tape, bound, params_l1, z, &plan_shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_grid(dims: &[usize], channels: usize) -> ValueGrid {
        let mut shape = dims.to_vec();
        shape.push(channels);
        ValueGrid::from_fn(&shape, |idx| {
            let mut v = 0.0;
            for (ax, &i) in idx.iter().enumerate() {
                v += (i as f64 + 1.0) * (ax as f64 + 0.7);
            }
            (v * 0.13).sin()
        })
    }

    #[test]
    fn partition_counts_windows() {
        let spec = WindowSpec::flat(&[16, 16]).unwrap();
        let plan = WindowPlan::new(&[32, 32], 3, &spec);
        assert_eq!(plan.n_windows, 4);

        let spec3 = WindowSpec::flat(&[2, 8, 10]).unwrap();
        let plan3 = WindowPlan::new(&[8, 16, 20], 4, &spec3);
        assert_eq!(plan3.n_windows, 16);
    }

    #[test]
    fn partition_inverse_is_bit_exact() {
        for (dims, extents, shift) in [
            (vec![6, 9], vec![3, 4], vec![0, 0]),
            (vec![6, 9], vec![3, 4], vec![1, 2]),
            (vec![4, 6, 5], vec![2, 3, 4], vec![1, 0, 3]),
        ] {
            let spec = WindowSpec::new(&extents, &shift).unwrap();
            let plan = WindowPlan::new(&dims, 3, &spec);
            let grid = demo_grid(&dims, 3);
            let mut tape = Tape::new();
            let g = tape.input(grid.clone(), false);
            let windows = partition_windows(&mut tape, g, &plan).unwrap();
            let back = unpartition_windows(&mut tape, windows, &plan).unwrap();
            assert_eq!(tape.value(back).data(), grid.data());
        }
    }

    #[test]
    fn window_permutation_reassembles_identically() {
        // Processing windows in any order must not change the reassembled
        // grid: permute the window axis and route the inverse through the
        // permuted layout.
        let spec = WindowSpec::new(&[3, 4], &[1, 2]).unwrap();
        let plan = WindowPlan::new(&[6, 8], 2, &spec);
        let grid = demo_grid(&[6, 8], 2);
        let mut tape = Tape::new();
        let g = tape.input(grid.clone(), false);
        let windows = partition_windows(&mut tape, g, &plan).unwrap();

        let w = plan.n_windows;
        let block = plan.tokens * plan.channels;
        let perm: Vec<usize> = (0..w).rev().collect();
        let mut fwd = Vec::with_capacity(w * block);
        for &src_w in &perm {
            for i in 0..block {
                fwd.push(src_w * block + i);
            }
        }
        let flat = tape.reshape(windows, &[w * block]).unwrap();
        let permuted = tape
            .gather(flat, Rc::new(fwd), &[w, plan.tokens, plan.channels])
            .unwrap();
        // Invert: gather back into original order, then unpartition.
        let mut inv = vec![0usize; w * block];
        for (dst_w, &src_w) in perm.iter().enumerate() {
            for i in 0..block {
                inv[src_w * block + i] = dst_w * block + i;
            }
        }
        let pflat = tape.reshape(permuted, &[w * block]).unwrap();
        let unpermuted = tape
            .gather(pflat, Rc::new(inv), &[w, plan.tokens, plan.channels])
            .unwrap();
        let back = unpartition_windows(&mut tape, unpermuted, &plan).unwrap();
        assert_eq!(tape.value(back).data(), grid.data());
    }

    fn test_params(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        extents: &[usize],
        seed: u64,
    ) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::register(
            store,
            prefix,
            channels,
            heads,
            extents,
            &AttentionInit::default(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn head_split_must_divide() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = AttentionParams::register(
            &mut store,
            "a",
            6,
            4,
            &[2, 2],
            &AttentionInit::default(),
            &mut rng,
        );
        assert!(matches!(err, Err(AttentionError::HeadSplit { .. })));
    }

    #[test]
    fn zero_q_projection_averages_values() {
        // QKᵀ ≡ 0 and B = 0 → uniform softmax → every output token is the
        // mean of the value projections (W_o set to identity to observe it).
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", 4, 2, &[1, 3], 7);
        store.grid_mut(params.wq).data_mut().fill(0.0);
        let wo = store.grid_mut(params.wo);
        wo.data_mut().fill(0.0);
        for i in 0..4 {
            wo.data_mut()[i * 4 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tokens = tape.input(demo_grid(&[1, 3], 4), false);
        let out = window_attention(&mut tape, &bound, &params, tokens, None, None, None).unwrap();

        // Oracle: mean of the V projections.
        let x = demo_grid(&[1, 3], 4);
        let wv = store.grid(params.wv);
        let mut v = vec![0.0; 3 * 4];
        for t in 0..3 {
            for o in 0..4 {
                for i in 0..4 {
                    v[t * 4 + o] += x.data()[t * 4 + i] * wv.data()[i * 4 + o];
                }
            }
        }
        let mean: Vec<f64> = (0..4)
            .map(|o| (v[o] + v[4 + o] + v[8 + o]) / 3.0)
            .collect();
        for t in 0..3 {
            for o in 0..4 {
                let got = tape.value(out.tokens).data()[t * 4 + o];
                assert!((got - mean[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_window_returns_value_projection() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", 4, 1, &[1, 1], 3);
        let wo = store.grid_mut(params.wo);
        wo.data_mut().fill(0.0);
        for i in 0..4 {
            wo.data_mut()[i * 4 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tokens = tape.input(demo_grid(&[2, 1], 4), false);
        let out = window_attention(&mut tape, &bound, &params, tokens, None, None, None).unwrap();

        let x = demo_grid(&[2, 1], 4);
        let wv = store.grid(params.wv);
        for wdx in 0..2 {
            for o in 0..4 {
                let mut v = 0.0;
                for i in 0..4 {
                    v += x.data()[wdx * 4 + i] * wv.data()[i * 4 + o];
                }
                let got = tape.value(out.tokens).data()[wdx * 4 + o];
                assert!((got - v).abs() < 1e-12);
            }
        }
    }

    /// Brute-force dense attention over all cells, no windowing.
    fn dense_attention_oracle(
        x: &ValueGrid, // [N, C]
        store: &ParamStore,
        params: &AttentionParams,
    ) -> Vec<f64> {
        let n = x.shape()[0];
        let c = params.channels;
        let heads = params.heads;
        let hd = params.head_dim;
        let proj = |w: &ValueGrid, b: &ValueGrid| -> Vec<f64> {
            let mut out = vec![0.0; n * c];
            for t in 0..n {
                for o in 0..c {
                    let mut acc = b.data()[o];
                    for i in 0..c {
                        acc += x.data()[t * c + i] * w.data()[i * c + o];
                    }
                    out[t * c + o] = acc;
                }
            }
            out
        };
        let q = proj(store.grid(params.wq), store.grid(params.bq));
        let k = proj(store.grid(params.wk), store.grid(params.bk));
        let v = proj(store.grid(params.wv), store.grid(params.bv));
        let mut ctx = vec![0.0; n * c];
        for h in 0..heads {
            for t1 in 0..n {
                let mut logits = vec![0.0; n];
                for t2 in 0..n {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += q[t1 * c + h * hd + d] * k[t2 * c + h * hd + d];
                    }
                    logits[t2] = dot / (hd as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for t2 in 0..n {
                    let wgt = exps[t2] / z;
                    for d in 0..hd {
                        ctx[t1 * c + h * hd + d] += wgt * v[t2 * c + h * hd + d];
                    }
                }
            }
        }
        let wo = store.grid(params.wo);
        let bo = store.grid(params.bo);
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for o in 0..c {
                let mut acc = bo.data()[o];
                for i in 0..c {
                    acc += ctx[t * c + i] * wo.data()[i * c + o];
                }
                out[t * c + o] = acc;
            }
        }
        out
    }

    #[test]
    fn full_window_equals_dense_attention_2d() {
        let dims = [4, 5];
        let c = 8;
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", c, 2, &dims, 11);
        let spec = WindowSpec::flat(&dims).unwrap();
        let plan = WindowPlan::new(&dims, c, &spec);
        assert_eq!(plan.n_windows, 1);

        let grid = demo_grid(&dims, c);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(grid.clone(), false);
        let windows = partition_windows(&mut tape, g, &plan).unwrap();
        let out = window_attention(
            &mut tape,
            &bound,
            &params,
            windows,
            None,
            plan.mask_grid(),
            None, // zero-init bias ⇒ identical with or without the table
        )
        .unwrap();

        let flat = ValueGrid::from_vec(&[20, c], grid.data().to_vec()).unwrap();
        let oracle = dense_attention_oracle(&flat, &store, &params);
        for (a, b) in tape.value(out.tokens).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn full_window_equals_dense_attention_3d() {
        let dims = [2, 3, 4];
        let c = 6;
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", c, 3, &dims, 13);
        let spec = WindowSpec::flat(&dims).unwrap();
        let plan = WindowPlan::new(&dims, c, &spec);
        let grid = demo_grid(&dims, c);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(grid.clone(), false);
        let windows = partition_windows(&mut tape, g, &plan).unwrap();
        let out =
            window_attention(&mut tape, &bound, &params, windows, None, plan.mask_grid(), None)
                .unwrap();
        let flat = ValueGrid::from_vec(&[24, c], grid.data().to_vec()).unwrap();
        let oracle = dense_attention_oracle(&flat, &store, &params);
        for (a, b) in tape.value(out.tokens).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dims = [6, 8];
        let c = 4;
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", c, 2, &[3, 4], 5);
        let spec = WindowSpec::half_shifted(&[3, 4]).unwrap();
        let plan = WindowPlan::new(&dims, c, &spec);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(demo_grid(&dims, c), false);
        let windows = partition_windows(&mut tape, g, &plan).unwrap();
        let out = window_attention(
            &mut tape,
            &bound,
            &params,
            windows,
            None,
            plan.mask_grid(),
            Some(&plan.bias_offsets),
        )
        .unwrap();
        let w = tape.value(out.weights);
        let t = plan.tokens;
        for row in w.data().chunks(t) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn shifted_mask_zeroes_cross_neighborhood_weights() {
        // Tokens whose pre-roll coordinates differ by at least the window
        // extent along some axis were never neighbors; their attention
        // weight must be exactly zero.
        let dims = [6, 6];
        let c = 4;
        let extents = [3, 3];
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", c, 2, &extents, 17);
        let spec = WindowSpec::half_shifted(&extents).unwrap();
        let plan = WindowPlan::new(&dims, c, &spec);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(demo_grid(&dims, c), false);
        let windows = partition_windows(&mut tape, g, &plan).unwrap();
        let out = window_attention(
            &mut tape,
            &bound,
            &params,
            windows,
            None,
            plan.mask_grid(),
            Some(&plan.bias_offsets),
        )
        .unwrap();
        let weights = tape.value(out.weights);

        // Pre-roll coordinate of each (window, token) slot.
        let t = plan.tokens;
        let pre_roll = |w: usize, tok: usize| -> (usize, usize) {
            let wy = w / 2;
            let wx = w % 2;
            let ty = tok / 3;
            let tx = tok % 3;
            let py = wy * 3 + ty;
            let px = wx * 3 + tx;
            (
                (py + spec.shift[0]) % plan.padded[0],
                (px + spec.shift[1]) % plan.padded[1],
            )
        };
        let mut cross_pairs = 0;
        for w in 0..plan.n_windows {
            for t1 in 0..t {
                for t2 in 0..t {
                    let (y1, x1) = pre_roll(w, t1);
                    let (y2, x2) = pre_roll(w, t2);
                    let far = y1.abs_diff(y2) >= extents[0] || x1.abs_diff(x2) >= extents[1];
                    if far {
                        cross_pairs += 1;
                        for h in 0..params.heads {
                            let idx = ((w * params.heads + h) * t + t1) * t + t2;
                            assert_eq!(
                                weights.data()[idx], 0.0,
                                "window {w} head {h} pair ({t1},{t2})"
                            );
                        }
                    }
                }
            }
        }
        assert!(cross_pairs > 0, "test must exercise wrapped pairs");
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let dims = [4, 4];
        let c = 4;
        let mut store = ParamStore::new();
        let params = test_params(&mut store, "blk", c, 2, &[2, 2], 19);
        for id in [
            params.wq, params.wk, params.wv, params.wo, params.mlp_w1, params.mlp_w2,
        ] {
            store.grid_mut(id).data_mut().fill(0.0);
        }
        let spec = WindowSpec::flat(&[2, 2]).unwrap();
        let grid = demo_grid(&dims, c);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(grid.clone(), false);
        let params2 = params.clone();
        let out = swin_block_pair(&mut tape, &bound, &params, &params2, g, &spec).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(grid.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn block_pair_preserves_shape() {
        let dims = [16, 20];
        let c = 8;
        let mut store = ParamStore::new();
        let p1 = test_params(&mut store, "b1", c, 2, &[4, 5], 23);
        let p2 = test_params(&mut store, "b2", c, 2, &[4, 5], 29);
        let spec = WindowSpec::flat(&[4, 5]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = tape.input(demo_grid(&dims, c), false);
        let out = swin_block_pair(&mut tape, &bound, &p1, &p2, g, &spec).unwrap();
        assert_eq!(tape.shape(out), &[16, 20, 8]);
    }

    #[test]
    fn three_d_with_unit_depth_equals_two_d() {
        let c = 4;
        let mut store2 = ParamStore::new();
        let params2 = test_params(&mut store2, "blk", c, 2, &[2, 3], 31);
        let mut store3 = ParamStore::new();
        let params3 = test_params(&mut store3, "blk", c, 2, &[1, 2, 3], 31);
        // Same seed ⇒ identical projection weights; bias tables are zero and
        // have matching sizes ((2·1−1) leading factor).
        let grid2 = demo_grid(&[4, 6], c);
        let grid3 = ValueGrid::from_vec(&[1, 4, 6, c], grid2.data().to_vec()).unwrap();

        let spec2 = WindowSpec::flat(&[2, 3]).unwrap();
        let plan2 = WindowPlan::new(&[4, 6], c, &spec2);
        let mut tape2 = Tape::new();
        let bound2 = store2.bind(&mut tape2);
        let g2 = tape2.input(grid2, false);
        let out2 = swin_block(&mut tape2, &bound2, &params2, g2, &plan2).unwrap();

        let spec3 = WindowSpec::flat(&[1, 2, 3]).unwrap();
        let plan3 = WindowPlan::new(&[1, 4, 6], c, &spec3);
        let mut tape3 = Tape::new();
        let bound3 = store3.bind(&mut tape3);
        let g3 = tape3.input(grid3, false);
        let out3 = swin_block(&mut tape3, &bound3, &params3, g3, &plan3).unwrap();

        for (a, b) in tape2
            .value(out2)
            .data()
            .iter()
            .zip(tape3.value(out3).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let dims = [4, 6];
        let c = 4;
        let mut store = ParamStore::new();
        let p1 = test_params(&mut store, "b1", c, 2, &[2, 3], 37);
        let p2 = test_params(&mut store, "b2", c, 2, &[2, 3], 41);
        let spec = WindowSpec::flat(&[2, 3]).unwrap();
        let report = finite_difference_check(
            |tape, vars| {
                let bound = store.bind(tape);
                swin_block_pair(tape, &bound, &p1, &p2, vars[0], &spec)
            },
            &[demo_grid(&dims, c)],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error);
    }
}
