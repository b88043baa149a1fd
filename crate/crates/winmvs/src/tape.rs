//! Reverse-mode automatic differentiation over [`ValueGrid`]s.
//!
//! A [`Tape`] records every primitive operation as it executes (eager
//! forward evaluation) and can then
//!
//! * replay the record on fresh input values, reproducing the forward pass
//!   bit-exactly ([`Tape::evaluate`]),
//! * run the reverse sweep to accumulate gradients for every input that was
//!   registered with `requires_grad` ([`Tape::backward`]),
//! * compare analytic gradients against central finite differences, flagging
//!   coordinates that sit on a non-smooth decision boundary
//!   ([`finite_difference_check`]).
//!
//! Primitives: add/sub/mul/div, scalar scale/offset, exp, ln, sqrt, abs,
//! sigmoid, elementwise maximum, batched matrix product, gather/scatter by
//! index, bilinear sampling, reshape/permute, axis expansion, reduction-sum
//! and reduction-max. Every primitive has a registered adjoint. Reduction-max
//! breaks ties toward the lowest index. Bilinear sampling outside the grid
//! returns zero value, zero gradient and a cleared in-bounds flag.
//!
//! Values are immutable once recorded; evaluation of independent tapes may
//! run in parallel. A single backward sweep is sequential and deterministic.

use crate::grid::{strides_of, ValueGrid};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
    #[error("backward seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("gradient requested before backward was run")]
    BackwardNotRun,
    #[error("variable does not track gradients")]
    NoGradient,
    #[error("replay expected {expected} input grids, got {actual}")]
    ReplayInputCount { expected: usize, actual: usize },
    #[error("replay input {index} has shape {actual:?}, recorded shape is {expected:?}")]
    ReplayInputShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input {
        requires_grad: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Sigmoid(Var),
    Maximum(Var, Var),
    MatMul(Var, Var),
    Gather {
        src: Var,
        indices: Rc<Vec<usize>>,
    },
    /// `out[indices[i]] += src[i]`, zeros elsewhere. Duplicate targets
    /// accumulate in iteration order.
    Scatter {
        src: Var,
        indices: Rc<Vec<usize>>,
    },
    Reshape(Var),
    Permute {
        src: Var,
        axes: Rc<Vec<usize>>,
    },
    SumAxis {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    /// Repeats an axis of length 1 `n` times.
    ExpandAxis {
        src: Var,
        axis: usize,
        n: usize,
    },
    MaxAxis {
        src: Var,
        axis: usize,
    },
    /// Numerically stable softmax over the last axis.
    SoftmaxLastDim(Var),
    /// `out = x + b` with `b` viewed as `b_view` (same rank as `x`, axes
    /// equal or 1) and broadcast along the 1-axes.
    AddBroadcast {
        x: Var,
        b: Var,
        b_view: Rc<Vec<usize>>,
    },
    /// `out = x ⊙ b` with the same broadcast semantics.
    MulBroadcast {
        x: Var,
        b: Var,
        b_view: Rc<Vec<usize>>,
    },
    /// `grid` is `[H, W, C]`, `coords` is `[N, 2]` as (x, y). Output `[N, C]`.
    BilinearSample {
        grid: Var,
        coords: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
}

/// Data-dependent choices made during evaluation (argmax winners, max
/// branches, sampling cells, abs signs). Two forward passes that agree on
/// the signature lie on the same smooth piece of the function.
#[derive(Clone, Debug, Default, PartialEq)]
struct Decision(Vec<u32>);

struct Node {
    op: Op,
    value: ValueGrid,
    needs_grad: bool,
    decision: Decision,
}

/// Recorded computation: eager forward values plus enough structure to
/// replay the record and to run the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    input_vars: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_run: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input grid. Inputs are the replaceable leaves of the
    /// record; everything else is recomputed on replay.
    pub fn input(&mut self, grid: ValueGrid, requires_grad: bool) -> Var {
        let var = self.push(
            Op::Input { requires_grad },
            grid,
            requires_grad,
            Decision::default(),
        );
        self.input_vars.push(var);
        var
    }

    /// Input that never tracks gradients.
    pub fn constant(&mut self, grid: ValueGrid) -> Var {
        self.input(grid, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ValueGrid::scalar(value))
    }

    pub fn value(&self, v: Var) -> &ValueGrid {
        &self.nodes[v.0].value
    }

    /// True when `v` is an input registered with gradient tracking.
    pub fn requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input { requires_grad: true })
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: ValueGrid, needs_grad: bool, decision: Decision) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            decision,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> TapeResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::Shape {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.binary_same_shape("add", a, b)?;
        let value = eval_zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs, Decision::default()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = eval_zip(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs, Decision::default()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = eval_zip(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs, Decision::default()))
    }

    pub fn div(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.binary_same_shape("div", a, b)?;
        let value = eval_zip(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), value, needs, Decision::default()))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(Op::Neg(a), value, needs, Decision::default())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), value, needs, Decision::default())
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), value, needs, Decision::default())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.push(Op::Exp(a), value, needs, Decision::default())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        self.push(Op::Ln(a), value, needs, Decision::default())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        self.push(Op::Sqrt(a), value, needs, Decision::default())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let needs = self.needs(a);
        let decision = Decision(self.value(a).data().iter().map(|&x| sign_code(x)).collect());
        self.push(Op::Abs(a), value, needs, decision)
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs, Decision::default())
    }

    /// Elementwise maximum; at exact ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        self.binary_same_shape("maximum", a, b)?;
        let decision = Decision(
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| u32::from(x >= y))
                .collect(),
        );
        let value = eval_zip(self.value(a), self.value(b), f64::max);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Maximum(a, b), value, needs, decision))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.maximum(na, nb)?;
        Ok(self.neg(m))
    }

    fn check_broadcast(
        &self,
        op: &'static str,
        x: Var,
        b: Var,
        b_view: &[usize],
    ) -> TapeResult<()> {
        let xs = self.shape(x);
        let ok = b_view.len() == xs.len()
            && b_view.iter().product::<usize>() == self.value(b).len()
            && b_view
                .iter()
                .zip(xs)
                .all(|(&bv, &xv)| bv == xv || bv == 1);
        if !ok {
            return Err(TapeError::Shape {
                op,
                detail: format!(
                    "view {:?} of a {}-element grid does not broadcast onto {:?}",
                    b_view,
                    self.value(b).len(),
                    xs
                ),
            });
        }
        Ok(())
    }

    /// `x + b` with `b` reinterpreted as `b_view` and broadcast along its
    /// 1-axes.
    pub fn add_broadcast(&mut self, x: Var, b: Var, b_view: &[usize]) -> TapeResult<Var> {
        self.check_broadcast("add_broadcast", x, b, b_view)?;
        let value = eval_broadcast_zip(self.value(x), self.value(b), b_view, |a, c| a + c);
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Op::AddBroadcast {
                x,
                b,
                b_view: Rc::new(b_view.to_vec()),
            },
            value,
            needs,
            Decision::default(),
        ))
    }

    /// `x ⊙ b` with `b` reinterpreted as `b_view` and broadcast along its
    /// 1-axes.
    pub fn mul_broadcast(&mut self, x: Var, b: Var, b_view: &[usize]) -> TapeResult<Var> {
        self.check_broadcast("mul_broadcast", x, b, b_view)?;
        let value = eval_broadcast_zip(self.value(x), self.value(b), b_view, |a, c| a * c);
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Op::MulBroadcast {
                x,
                b,
                b_view: Rc::new(b_view.to_vec()),
            },
            value,
            needs,
            Decision::default(),
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product: `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> TapeResult<Var> {
        let (value, _) = eval_matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs, Decision::default()))
    }

    // ── Indexing ────────────────────────────────────────────────────────

    /// `out[i] = src[indices[i]]`, output reshaped to `out_shape`.
    pub fn gather(
        &mut self,
        src: Var,
        indices: Rc<Vec<usize>>,
        out_shape: &[usize],
    ) -> TapeResult<Var> {
        let src_len = self.value(src).len();
        let expected: usize = out_shape.iter().product();
        if indices.len() != expected {
            return Err(TapeError::Shape {
                op: "gather",
                detail: format!(
                    "index count {} does not match output shape {:?}",
                    indices.len(),
                    out_shape
                ),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_len) {
            return Err(TapeError::Shape {
                op: "gather",
                detail: format!("index {bad} out of bounds for source of length {src_len}"),
            });
        }
        let value = eval_gather(self.value(src), &indices, out_shape);
        let needs = self.needs(src);
        Ok(self.push(Op::Gather { src, indices }, value, needs, Decision::default()))
    }

    /// Scatter-add of `src` into a zero grid of `out_shape`:
    /// `out[indices[i]] += src[i]`.
    pub fn scatter(
        &mut self,
        src: Var,
        indices: Rc<Vec<usize>>,
        out_shape: &[usize],
    ) -> TapeResult<Var> {
        let out_len: usize = out_shape.iter().product();
        if indices.len() != self.value(src).len() {
            return Err(TapeError::Shape {
                op: "scatter",
                detail: format!(
                    "index count {} does not match source length {}",
                    indices.len(),
                    self.value(src).len()
                ),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_len) {
            return Err(TapeError::Shape {
                op: "scatter",
                detail: format!("index {bad} out of bounds for output of length {out_len}"),
            });
        }
        let value = eval_scatter(self.value(src), &indices, out_shape);
        let needs = self.needs(src);
        Ok(self.push(
            Op::Scatter { src, indices },
            value,
            needs,
            Decision::default(),
        ))
    }

    // ── Shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TapeResult<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.value(a).len() {
            return Err(TapeError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(a), shape),
            });
        }
        let value = ValueGrid::from_vec(shape, self.value(a).data().to_vec()).expect("checked");
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs, Decision::default()))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> TapeResult<Var> {
        let ndim = self.shape(a).len();
        let mut seen = vec![false; ndim];
        if axes.len() != ndim || axes.iter().any(|&ax| ax >= ndim || std::mem::replace(&mut seen[ax], true)) {
            return Err(TapeError::Shape {
                op: "permute",
                detail: format!("axes {:?} are not a permutation of 0..{}", axes, ndim),
            });
        }
        let value = eval_permute(self.value(a), axes);
        let needs = self.needs(a);
        Ok(self.push(
            Op::Permute {
                src: a,
                axes: Rc::new(axes.to_vec()),
            },
            value,
            needs,
            Decision::default(),
        ))
    }

    // ── Reductions and broadcasts ───────────────────────────────────────

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> TapeResult<Var> {
        if axis >= self.shape(a).len() {
            return Err(TapeError::Shape {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for {:?}", self.shape(a)),
            });
        }
        let value = eval_sum_axis(self.value(a), axis);
        let needs = self.needs(a);
        Ok(self.push(Op::SumAxis { src: a, axis }, value, needs, Decision::default()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), ValueGrid::scalar(total), needs, Decision::default())
    }

    /// Repeats an axis of length 1 to length `n`.
    pub fn expand_axis(&mut self, a: Var, axis: usize, n: usize) -> TapeResult<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(TapeError::Shape {
                op: "expand_axis",
                detail: format!("axis {axis} of {:?} must exist with length 1", shape),
            });
        }
        let value = eval_expand_axis(self.value(a), axis, n);
        let needs = self.needs(a);
        Ok(self.push(
            Op::ExpandAxis { src: a, axis, n },
            value,
            needs,
            Decision::default(),
        ))
    }

    /// Maximum over one axis (removed from the shape); ties break toward the
    /// lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> TapeResult<Var> {
        if axis >= self.shape(a).len() {
            return Err(TapeError::Shape {
                op: "max_axis",
                detail: format!("axis {axis} out of range for {:?}", self.shape(a)),
            });
        }
        let (value, winners) = eval_max_axis(self.value(a), axis);
        let needs = self.needs(a);
        Ok(self.push(
            Op::MaxAxis { src: a, axis },
            value,
            needs,
            Decision(winners),
        ))
    }

    // ── Sampling ────────────────────────────────────────────────────────

    /// Bilinear sampling of `grid` (`[H, W, C]`) at `coords` (`[N, 2]`,
    /// (x, y) pixel units). Out-of-bounds samples yield zero values and zero
    /// gradients; [`Tape::last_sample_mask`] exposes the in-bounds flags of
    /// the most recent sampling node.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> TapeResult<Var> {
        let gshape = self.shape(grid);
        if gshape.len() != 3 {
            return Err(TapeError::Shape {
                op: "bilinear_sample",
                detail: format!("grid must be [H, W, C], got {:?}", gshape),
            });
        }
        let cshape = self.shape(coords);
        if cshape.len() != 2 || cshape[1] != 2 {
            return Err(TapeError::Shape {
                op: "bilinear_sample",
                detail: format!("coords must be [N, 2], got {:?}", cshape),
            });
        }
        let (value, decision) = eval_bilinear(self.value(grid), self.value(coords));
        let needs = self.needs(grid) || self.needs(coords);
        Ok(self.push(
            Op::BilinearSample { grid, coords },
            value,
            needs,
            decision,
        ))
    }

    /// In-bounds flags for a [`Tape::bilinear_sample`] node.
    pub fn sample_mask(&self, sample: Var) -> Vec<bool> {
        match &self.nodes[sample.0].op {
            Op::BilinearSample { .. } => self.nodes[sample.0]
                .decision
                .0
                .chunks(3)
                .map(|c| c[2] == 1)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> TapeResult<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(ax, (x, y))| ax == axis || x == y);
        if !compatible {
            return Err(TapeError::Shape {
                op: "concat",
                detail: format!("{:?} and {:?} along axis {axis}", sa, sb),
            });
        }
        let value = eval_concat(self.value(a), self.value(b), axis);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b, axis }, value, needs, Decision::default()))
    }

    // ── Composite helpers ───────────────────────────────────────────────

    /// `x * sigmoid(x)` — the smooth activation used by the MLPs.
    pub fn silu(&mut self, x: Var) -> TapeResult<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// Softmax over the last axis, with an optional additive logit offset
    /// (used for attention masks). Row maxima are subtracted before
    /// exponentiation, so masked logits of −1e30 underflow to exactly zero.
    pub fn softmax_lastdim(&mut self, x: Var, logit_offset: Option<Var>) -> TapeResult<Var> {
        let x = match logit_offset {
            Some(off) => self.add(x, off)?,
            None => x,
        };
        let value = eval_softmax_lastdim(self.value(x));
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxLastDim(x), value, needs, Decision::default()))
    }

    /// Layer normalization over the last axis with learned `scale`/`offset`
    /// vectors of length `C`.
    pub fn layer_norm_lastdim(
        &mut self,
        x: Var,
        scale: Var,
        offset: Var,
        eps: f64,
    ) -> TapeResult<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("layer norm needs at least one axis");
        let rows = self.value(x).len() / c;
        let flat = self.reshape(x, &[rows, c])?;
        let mean = self.sum_axis(flat, 1)?;
        let neg_mean = self.scale(mean, -1.0 / c as f64);
        let centered = self.add_broadcast(flat, neg_mean, &[rows, 1])?;
        let sq = self.mul(centered, centered)?;
        let var = self.sum_axis(sq, 1)?;
        let var = self.scale(var, 1.0 / c as f64);
        let var = self.add_scalar(var, eps);
        let std = self.sqrt(var);
        let ones = self.constant(ValueGrid::filled(&[rows], 1.0));
        let inv_std = self.div(ones, std)?;
        let normalized = self.mul_broadcast(centered, inv_std, &[rows, 1])?;
        let scaled = self.mul_broadcast(normalized, scale, &[1, c])?;
        let shifted = self.add_broadcast(scaled, offset, &[1, c])?;
        self.reshape(shifted, &shape)
    }

    /// Broadcasts a `[C]` vector to `[rows, C]`.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> TapeResult<Var> {
        let c = self.value(v).len();
        let r = self.reshape(v, &[1, c])?;
        self.expand_axis(r, 0, rows)
    }

    /// `x·W + b` for `x: [rows, c_in]`, `w: [c_in, c_out]`, `b: [c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> TapeResult<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let c_out = self.shape(y)[1];
                self.add_broadcast(y, b, &[1, c_out])
            }
            None => Ok(y),
        }
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep seeded with `seed` at `output`. Gradients from earlier
    /// backward calls on this tape are cleared first; fan-out accumulates
    /// additively within one sweep.
    pub fn backward(&mut self, output: Var, seed: &ValueGrid) -> TapeResult<()> {
        if output.0 >= self.nodes.len() {
            return Err(TapeError::UnknownVar(output.0));
        }
        if seed.shape() != self.shape(output) {
            return Err(TapeError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.shape(output).to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(seed.data().to_vec());
        for idx in (0..=output.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = self.grads[idx].take().expect("checked above");
            self.propagate(idx, &grad);
            // Inputs keep their accumulated gradient for retrieval.
            if matches!(self.nodes[idx].op, Op::Input { .. }) {
                self.grads[idx] = Some(grad);
            }
        }
        self.backward_run = true;
        Ok(())
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> TapeResult<()> {
        let seed = ValueGrid::filled(self.shape(output), 1.0);
        if seed.len() != 1 {
            return Err(TapeError::SeedShape {
                seed: vec![1],
                output: self.shape(output).to_vec(),
            });
        }
        self.backward(output, &seed)
    }

    /// Gradient of the last backward sweep with respect to `v`.
    pub fn gradient(&self, v: Var) -> TapeResult<ValueGrid> {
        if !self.backward_run {
            return Err(TapeError::BackwardNotRun);
        }
        if v.0 >= self.nodes.len() {
            return Err(TapeError::UnknownVar(v.0));
        }
        if !self.nodes[v.0].needs_grad {
            return Err(TapeError::NoGradient);
        }
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.value(v).len()],
        };
        Ok(ValueGrid::from_vec(self.shape(v), data).expect("gradient shape matches value"))
    }

    fn accum(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn accum_owned(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input { .. } => {}
            Op::Add(a, b) => {
                self.accum(a, grad);
                self.accum(b, grad);
            }
            Op::Sub(a, b) => {
                self.accum(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accum_owned(b, neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accum_owned(a, da);
                self.accum_owned(b, db);
            }
            Op::Div(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(g, y)| g / y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.value(a).data().iter().zip(self.value(b).data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accum_owned(a, da);
                self.accum_owned(b, db);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accum_owned(a, da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| c * g).collect();
                self.accum_owned(a, da);
            }
            Op::AddScalar(a, _) => self.accum(a, grad),
            Op::Exp(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accum_owned(a, da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.accum_owned(a, da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| 0.5 * g / y)
                    .collect();
                self.accum_owned(a, da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g * sign_of(*x))
                    .collect();
                self.accum_owned(a, da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum_owned(a, da);
            }
            Op::Maximum(a, b) => {
                let branches = &self.nodes[idx].decision.0;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(branches)
                    .map(|(g, &take_a)| if take_a == 1 { *g } else { 0.0 })
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(branches)
                    .map(|(g, &take_a)| if take_a == 1 { 0.0 } else { *g })
                    .collect();
                self.accum_owned(a, da);
                self.accum_owned(b, db);
            }
            Op::MatMul(a, b) => {
                let (da, db) = matmul_adjoint(self.value(a), self.value(b), grad);
                self.accum_owned(a, da);
                self.accum_owned(b, db);
            }
            Op::Gather { src, indices } => {
                let mut da = vec![0.0; self.value(src).len()];
                for (g, &i) in grad.iter().zip(indices.iter()) {
                    da[i] += g;
                }
                self.accum_owned(src, da);
            }
            Op::Scatter { src, indices, .. } => {
                let da: Vec<f64> = indices.iter().map(|&i| grad[i]).collect();
                self.accum_owned(src, da);
            }
            Op::Reshape(a) => self.accum(a, grad),
            Op::Permute { src, axes } => {
                let da = permute_adjoint(self.value(src).shape(), &axes, grad);
                self.accum_owned(src, da);
            }
            Op::SumAxis { src, axis } => {
                let da = sum_axis_adjoint(self.value(src).shape(), axis, grad);
                self.accum_owned(src, da);
            }
            Op::SumAll(a) => {
                let da = vec![grad[0]; self.value(a).len()];
                self.accum_owned(a, da);
            }
            Op::ExpandAxis { src, axis, n } => {
                let da = expand_axis_adjoint(self.value(src).shape(), axis, n, grad);
                self.accum_owned(src, da);
            }
            Op::MaxAxis { src, axis } => {
                let winners = self.nodes[idx].decision.0.clone();
                let da = max_axis_adjoint(self.value(src).shape(), axis, &winners, grad);
                self.accum_owned(src, da);
            }
            Op::SoftmaxLastDim(src) => {
                // dx = p ⊙ (g − Σ_j g_j·p_j) per row.
                let p = self.nodes[idx].value.data();
                let shape = self.nodes[idx].value.shape();
                let n = *shape.last().expect("softmax output has an axis");
                let mut da = vec![0.0; p.len()];
                for (row, (p_row, g_row)) in p.chunks(n).zip(grad.chunks(n)).enumerate() {
                    let dot: f64 = p_row.iter().zip(g_row).map(|(pv, gv)| pv * gv).sum();
                    let out = &mut da[row * n..(row + 1) * n];
                    for ((o, pv), gv) in out.iter_mut().zip(p_row).zip(g_row) {
                        *o = pv * (gv - dot);
                    }
                }
                self.accum_owned(src, da);
            }
            Op::AddBroadcast { x, b, b_view } => {
                self.accum(x, grad);
                let db = broadcast_reduce(self.value(x).shape(), &b_view, grad, |acc, g, _| {
                    *acc += g;
                });
                self.accum_owned(b, db);
            }
            Op::MulBroadcast { x, b, b_view } => {
                let dx = broadcast_map(
                    self.value(x).shape(),
                    self.value(b).data(),
                    &b_view,
                    grad,
                    |g, bv| g * bv,
                );
                let xv = self.value(x).data().to_vec();
                let db = broadcast_reduce(self.value(x).shape(), &b_view, grad, |acc, g, i| {
                    *acc += g * xv[i];
                });
                self.accum_owned(x, dx);
                self.accum_owned(b, db);
            }
            Op::BilinearSample { grid, coords } => {
                let decision = self.nodes[idx].decision.0.clone();
                let (dgrid, dcoords) = bilinear_adjoint(
                    self.value(grid),
                    self.value(coords),
                    &decision,
                    grad,
                );
                self.accum_owned(grid, dgrid);
                self.accum_owned(coords, dcoords);
            }
            Op::Concat { a, b, axis } => {
                let (da, db) = concat_adjoint(self.value(a).shape(), self.value(b).shape(), axis, grad);
                self.accum_owned(a, da);
                self.accum_owned(b, db);
            }
        }
    }

    // ── Replay ──────────────────────────────────────────────────────────

    /// Replays the record with all registered inputs replaced positionally
    /// and returns the value of `output`. Identical inputs reproduce the
    /// recorded value bit-exactly.
    pub fn evaluate(&self, inputs: &[ValueGrid], output: Var) -> TapeResult<ValueGrid> {
        if inputs.len() != self.input_vars.len() {
            return Err(TapeError::ReplayInputCount {
                expected: self.input_vars.len(),
                actual: inputs.len(),
            });
        }
        let overrides: Vec<(Var, &ValueGrid)> = self
            .input_vars
            .iter()
            .copied()
            .zip(inputs.iter())
            .collect();
        let (value, _) = self.replay(&overrides, output)?;
        Ok(value)
    }

    /// Replays the record with selected input nodes overridden; returns the
    /// value at `output` and the decision signature of the replayed pass.
    pub fn replay(
        &self,
        overrides: &[(Var, &ValueGrid)],
        output: Var,
    ) -> TapeResult<(ValueGrid, u64)> {
        if output.0 >= self.nodes.len() {
            return Err(TapeError::UnknownVar(output.0));
        }
        for (pos, (var, grid)) in overrides.iter().enumerate() {
            if var.0 >= self.nodes.len() {
                return Err(TapeError::UnknownVar(var.0));
            }
            if grid.shape() != self.shape(*var) {
                return Err(TapeError::ReplayInputShape {
                    index: pos,
                    expected: self.shape(*var).to_vec(),
                    actual: grid.shape().to_vec(),
                });
            }
        }
        let mut values: Vec<ValueGrid> = Vec::with_capacity(output.0 + 1);
        let mut signature: u64 = 0xcbf29ce484222325;
        for idx in 0..=output.0 {
            let node = &self.nodes[idx];
            let (value, decision) = match &node.op {
                Op::Input { .. } => {
                    let replaced = overrides
                        .iter()
                        .find(|(v, _)| v.0 == idx)
                        .map(|(_, g)| (*g).clone());
                    (replaced.unwrap_or_else(|| node.value.clone()), Decision::default())
                }
                Op::Add(a, b) => (eval_zip(&values[a.0], &values[b.0], |x, y| x + y), Decision::default()),
                Op::Sub(a, b) => (eval_zip(&values[a.0], &values[b.0], |x, y| x - y), Decision::default()),
                Op::Mul(a, b) => (eval_zip(&values[a.0], &values[b.0], |x, y| x * y), Decision::default()),
                Op::Div(a, b) => (eval_zip(&values[a.0], &values[b.0], |x, y| x / y), Decision::default()),
                Op::Neg(a) => (values[a.0].map(|x| -x), Decision::default()),
                Op::Scale(a, c) => {
                    let c = *c;
                    (values[a.0].map(|x| c * x), Decision::default())
                }
                Op::AddScalar(a, c) => {
                    let c = *c;
                    (values[a.0].map(|x| x + c), Decision::default())
                }
                Op::Exp(a) => (values[a.0].map(f64::exp), Decision::default()),
                Op::Ln(a) => (values[a.0].map(f64::ln), Decision::default()),
                Op::Sqrt(a) => (values[a.0].map(f64::sqrt), Decision::default()),
                Op::Abs(a) => {
                    let decision = Decision(values[a.0].data().iter().map(|&x| sign_code(x)).collect());
                    (values[a.0].map(f64::abs), decision)
                }
                Op::Sigmoid(a) => (values[a.0].map(stable_sigmoid), Decision::default()),
                Op::Maximum(a, b) => {
                    let decision = Decision(
                        values[a.0]
                            .data()
                            .iter()
                            .zip(values[b.0].data())
                            .map(|(&x, &y)| u32::from(x >= y))
                            .collect(),
                    );
                    (eval_zip(&values[a.0], &values[b.0], f64::max), decision)
                }
                Op::MatMul(a, b) => {
                    let (v, _) = eval_matmul(&values[a.0], &values[b.0])?;
                    (v, Decision::default())
                }
                Op::Gather { src, indices } => (
                    eval_gather(&values[src.0], indices, node.value.shape()),
                    Decision::default(),
                ),
                Op::Scatter { src, indices, .. } => (
                    eval_scatter(&values[src.0], indices, node.value.shape()),
                    Decision::default(),
                ),
                Op::Reshape(a) => (
                    ValueGrid::from_vec(node.value.shape(), values[a.0].data().to_vec())
                        .expect("recorded reshape is valid"),
                    Decision::default(),
                ),
                Op::Permute { src, axes } => (eval_permute(&values[src.0], axes), Decision::default()),
                Op::SumAxis { src, axis } => (eval_sum_axis(&values[src.0], *axis), Decision::default()),
                Op::SumAll(a) => (
                    ValueGrid::scalar(values[a.0].data().iter().sum()),
                    Decision::default(),
                ),
                Op::ExpandAxis { src, axis, n } => {
                    (eval_expand_axis(&values[src.0], *axis, *n), Decision::default())
                }
                Op::MaxAxis { src, axis } => {
                    let (v, winners) = eval_max_axis(&values[src.0], *axis);
                    (v, Decision(winners))
                }
                Op::SoftmaxLastDim(src) => {
                    (eval_softmax_lastdim(&values[src.0]), Decision::default())
                }
                Op::AddBroadcast { x, b, b_view } => (
                    eval_broadcast_zip(&values[x.0], &values[b.0], b_view, |a, c| a + c),
                    Decision::default(),
                ),
                Op::MulBroadcast { x, b, b_view } => (
                    eval_broadcast_zip(&values[x.0], &values[b.0], b_view, |a, c| a * c),
                    Decision::default(),
                ),
                Op::BilinearSample { grid, coords } => {
                    let (v, d) = eval_bilinear(&values[grid.0], &values[coords.0]);
                    (v, d)
                }
                Op::Concat { a, b, axis } => {
                    (eval_concat(&values[a.0], &values[b.0], *axis), Decision::default())
                }
            };
            for &d in &decision.0 {
                signature = (signature ^ u64::from(d)).wrapping_mul(0x100000001b3);
            }
            values.push(value);
        }
        Ok((values[output.0].clone(), signature))
    }

    /// Decision signature of the recorded forward pass.
    pub fn signature(&self) -> u64 {
        let mut signature: u64 = 0xcbf29ce484222325;
        for node in &self.nodes {
            for &d in &node.decision.0 {
                signature = (signature ^ u64::from(d)).wrapping_mul(0x100000001b3);
            }
        }
        signature
    }
}

// ── Evaluation kernels ──────────────────────────────────────────────────

fn eval_zip(a: &ValueGrid, b: &ValueGrid, f: impl Fn(f64, f64) -> f64) -> ValueGrid {
    ValueGrid::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("shapes checked by caller")
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_code(x: f64) -> u32 {
    if x > 0.0 {
        2
    } else if x < 0.0 {
        0
    } else {
        1
    }
}

fn eval_matmul(a: &ValueGrid, b: &ValueGrid) -> TapeResult<(ValueGrid, ())> {
    let sa = a.shape();
    let sb = b.shape();
    let ok = sa.len() >= 2
        && sa.len() == sb.len()
        && sa[..sa.len() - 2] == sb[..sb.len() - 2]
        && sa[sa.len() - 1] == sb[sb.len() - 2];
    if !ok {
        return Err(TapeError::Shape {
            op: "matmul",
            detail: format!("{:?} × {:?}", sa, sb),
        });
    }
    let m = sa[sa.len() - 2];
    let k = sa[sa.len() - 1];
    let n = sb[sb.len() - 1];
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out_shape = sa[..sa.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
        let ov = &mut out[bi * m * n..(bi + 1) * m * n];
        matmul_nn(av, bv, m, k, n, ov);
    }
    Ok((ValueGrid::from_vec(&out_shape, out).expect("shape computed"), ()))
}

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn matmul_adjoint(a: &ValueGrid, b: &ValueGrid, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sa = a.shape();
    let sb = b.shape();
    let m = sa[sa.len() - 2];
    let k = sa[sa.len() - 1];
    let n = sb[sb.len() - 1];
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
        let gv = &grad[bi * m * n..(bi + 1) * m * n];
        matmul_nt(gv, bv, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
        matmul_tn(av, gv, m, k, n, &mut db[bi * k * n..(bi + 1) * k * n]);
    }
    (da, db)
}

fn eval_gather(src: &ValueGrid, indices: &[usize], out_shape: &[usize]) -> ValueGrid {
    let data: Vec<f64> = indices.iter().map(|&i| src.data()[i]).collect();
    ValueGrid::from_vec(out_shape, data).expect("checked by caller")
}

fn eval_scatter(src: &ValueGrid, indices: &[usize], out_shape: &[usize]) -> ValueGrid {
    let mut data = vec![0.0; out_shape.iter().product()];
    for (&i, &v) in indices.iter().zip(src.data()) {
        data[i] += v;
    }
    ValueGrid::from_vec(out_shape, data).expect("checked by caller")
}

fn eval_permute(src: &ValueGrid, axes: &[usize]) -> ValueGrid {
    let in_shape = src.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![0.0; src.len()];
    let ndim = in_shape.len();
    let mut idx = vec![0usize; ndim];
    for &v in src.data() {
        // idx is the input coordinate; map to the output position.
        let mut out_flat = 0;
        for (out_ax, &in_ax) in axes.iter().enumerate() {
            out_flat += idx[in_ax] * out_strides[out_ax];
        }
        data[out_flat] = v;
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            if idx[ax] < in_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let _ = in_strides;
    ValueGrid::from_vec(&out_shape, data).expect("permutation preserves length")
}

fn permute_adjoint(in_shape: &[usize], axes: &[usize], grad: &[f64]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let out_strides = strides_of(&out_shape);
    let ndim = in_shape.len();
    let mut da = vec![0.0; in_shape.iter().product()];
    let mut idx = vec![0usize; ndim];
    for slot in da.iter_mut() {
        let mut out_flat = 0;
        for (out_ax, &in_ax) in axes.iter().enumerate() {
            out_flat += idx[in_ax] * out_strides[out_ax];
        }
        *slot = grad[out_flat];
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            if idx[ax] < in_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    da
}

fn eval_sum_axis(src: &ValueGrid, axis: usize) -> ValueGrid {
    let shape = src.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(ax, _)| *ax != axis)
        .map(|(_, &d)| d)
        .collect();
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let out_base = o * inner;
            for i in 0..inner {
                data[out_base + i] += src.data()[base + i];
            }
        }
    }
    ValueGrid::from_vec(&out_shape, data).expect("shape computed")
}

fn sum_axis_adjoint(in_shape: &[usize], axis: usize, grad: &[f64]) -> Vec<f64> {
    let outer: usize = in_shape[..axis].iter().product();
    let mid = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut da = vec![0.0; outer * mid * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let g_base = o * inner;
            for i in 0..inner {
                da[base + i] = grad[g_base + i];
            }
        }
    }
    da
}

fn eval_expand_axis(src: &ValueGrid, axis: usize, n: usize) -> ValueGrid {
    let shape = src.shape();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src_base = o * inner;
        for r in 0..n {
            let dst_base = (o * n + r) * inner;
            data[dst_base..dst_base + inner]
                .copy_from_slice(&src.data()[src_base..src_base + inner]);
        }
    }
    ValueGrid::from_vec(&out_shape, data).expect("shape computed")
}

fn expand_axis_adjoint(in_shape: &[usize], axis: usize, n: usize, grad: &[f64]) -> Vec<f64> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut da = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst_base = o * inner;
        for r in 0..n {
            let src_base = (o * n + r) * inner;
            for i in 0..inner {
                da[dst_base + i] += grad[src_base + i];
            }
        }
    }
    da
}

fn eval_max_axis(src: &ValueGrid, axis: usize) -> (ValueGrid, Vec<u32>) {
    let shape = src.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(ax, _)| *ax != axis)
        .map(|(_, &d)| d)
        .collect();
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    let mut winners = vec![0u32; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut best_m = 0usize;
            for m in 0..mid {
                let v = src.data()[(o * mid + m) * inner + i];
                if v > best {
                    best = v;
                    best_m = m;
                }
            }
            data[o * inner + i] = best;
            winners[o * inner + i] = best_m as u32;
        }
    }
    (
        ValueGrid::from_vec(&out_shape, data).expect("shape computed"),
        winners,
    )
}

fn max_axis_adjoint(in_shape: &[usize], axis: usize, winners: &[u32], grad: &[f64]) -> Vec<f64> {
    let outer: usize = in_shape[..axis].iter().product();
    let mid = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut da = vec![0.0; outer * mid * inner];
    for o in 0..outer {
        for i in 0..inner {
            let m = winners[o * inner + i] as usize;
            da[(o * mid + m) * inner + i] = grad[o * inner + i];
        }
    }
    da
}

fn broadcast_strides(b_view: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; b_view.len()];
    let mut acc = 1usize;
    for ax in (0..b_view.len()).rev() {
        strides[ax] = if b_view[ax] == 1 { 0 } else { acc };
        acc *= b_view[ax];
    }
    strides
}

fn eval_broadcast_zip(
    x: &ValueGrid,
    b: &ValueGrid,
    b_view: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> ValueGrid {
    let xs = x.shape();
    let ndim = xs.len();
    let strides = broadcast_strides(b_view);
    let bd = b.data();
    let mut out = vec![0.0; x.len()];
    let mut idx = vec![0usize; ndim];
    let mut b_off = 0usize;
    for (xv, o) in x.data().iter().zip(out.iter_mut()) {
        *o = f(*xv, bd[b_off]);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            b_off += strides[ax];
            if idx[ax] < xs[ax] {
                break;
            }
            idx[ax] = 0;
            b_off -= strides[ax] * xs[ax];
        }
    }
    ValueGrid::from_vec(xs, out).expect("same shape as x")
}

/// Maps `grad` elementwise with the broadcast value of `b`.
fn broadcast_map(
    x_shape: &[usize],
    bd: &[f64],
    b_view: &[usize],
    grad: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let ndim = x_shape.len();
    let strides = broadcast_strides(b_view);
    let mut out = vec![0.0; grad.len()];
    let mut idx = vec![0usize; ndim];
    let mut b_off = 0usize;
    for (g, o) in grad.iter().zip(out.iter_mut()) {
        *o = f(*g, bd[b_off]);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            b_off += strides[ax];
            if idx[ax] < x_shape[ax] {
                break;
            }
            idx[ax] = 0;
            b_off -= strides[ax] * x_shape[ax];
        }
    }
    out
}

/// Folds `grad` into a `b`-sized accumulator along the broadcast axes; the
/// fold sees the flat index into the x-shaped grid.
fn broadcast_reduce(
    x_shape: &[usize],
    b_view: &[usize],
    grad: &[f64],
    fold: impl Fn(&mut f64, f64, usize),
) -> Vec<f64> {
    let ndim = x_shape.len();
    let strides = broadcast_strides(b_view);
    let mut out = vec![0.0; b_view.iter().product()];
    let mut idx = vec![0usize; ndim];
    let mut b_off = 0usize;
    for (i, g) in grad.iter().enumerate() {
        fold(&mut out[b_off], *g, i);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            b_off += strides[ax];
            if idx[ax] < x_shape[ax] {
                break;
            }
            idx[ax] = 0;
            b_off -= strides[ax] * x_shape[ax];
        }
    }
    out
}

fn eval_softmax_lastdim(x: &ValueGrid) -> ValueGrid {
    let n = *x.shape().last().expect("softmax needs an axis");
    let mut data = vec![0.0; x.len()];
    for (row, chunk) in x.data().chunks(n).enumerate() {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[row * n..(row + 1) * n];
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    ValueGrid::from_vec(x.shape(), data).expect("same shape")
}

fn eval_bilinear(grid: &ValueGrid, coords: &ValueGrid) -> (ValueGrid, Decision) {
    let h = grid.shape()[0];
    let w = grid.shape()[1];
    let c = grid.shape()[2];
    let n = coords.shape()[0];
    let mut data = vec![0.0; n * c];
    let mut decision = Vec::with_capacity(n * 3);
    for s in 0..n {
        let x = coords.data()[s * 2];
        let y = coords.data()[s * 2 + 1];
        let inb = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
        if !inb {
            decision.push(0);
            decision.push(0);
            decision.push(0);
            continue;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x0 = x0.min(w - 1);
        let y0 = y0.min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wx = x - x0 as f64;
        let wy = y - y0 as f64;
        decision.push(x0 as u32);
        decision.push(y0 as u32);
        decision.push(1);
        let base00 = (y0 * w + x0) * c;
        let base01 = (y0 * w + x1) * c;
        let base10 = (y1 * w + x0) * c;
        let base11 = (y1 * w + x1) * c;
        let out = &mut data[s * c..(s + 1) * c];
        for ch in 0..c {
            let v00 = grid.data()[base00 + ch];
            let v01 = grid.data()[base01 + ch];
            let v10 = grid.data()[base10 + ch];
            let v11 = grid.data()[base11 + ch];
            out[ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                + wy * ((1.0 - wx) * v10 + wx * v11);
        }
    }
    (
        ValueGrid::from_vec(&[n, c], data).expect("shape computed"),
        Decision(decision),
    )
}

fn bilinear_adjoint(
    grid: &ValueGrid,
    coords: &ValueGrid,
    decision: &[u32],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h = grid.shape()[0];
    let w = grid.shape()[1];
    let c = grid.shape()[2];
    let n = coords.shape()[0];
    let mut dgrid = vec![0.0; grid.len()];
    let mut dcoords = vec![0.0; coords.len()];
    for s in 0..n {
        if decision[s * 3 + 2] == 0 {
            continue;
        }
        let x = coords.data()[s * 2];
        let y = coords.data()[s * 2 + 1];
        let x0 = decision[s * 3] as usize;
        let y0 = decision[s * 3 + 1] as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wx = x - x0 as f64;
        let wy = y - y0 as f64;
        let base00 = (y0 * w + x0) * c;
        let base01 = (y0 * w + x1) * c;
        let base10 = (y1 * w + x0) * c;
        let base11 = (y1 * w + x1) * c;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for ch in 0..c {
            let g = grad[s * c + ch];
            dgrid[base00 + ch] += g * (1.0 - wy) * (1.0 - wx);
            dgrid[base01 + ch] += g * (1.0 - wy) * wx;
            dgrid[base10 + ch] += g * wy * (1.0 - wx);
            dgrid[base11 + ch] += g * wy * wx;
            let v00 = grid.data()[base00 + ch];
            let v01 = grid.data()[base01 + ch];
            let v10 = grid.data()[base10 + ch];
            let v11 = grid.data()[base11 + ch];
            dx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
            dy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
        }
        dcoords[s * 2] += dx;
        dcoords[s * 2 + 1] += dy;
    }
    (dgrid, dcoords)
}

fn eval_concat(a: &ValueGrid, b: &ValueGrid, axis: usize) -> ValueGrid {
    let sa = a.shape();
    let sb = b.shape();
    let mut out_shape = sa.to_vec();
    out_shape[axis] = sa[axis] + sb[axis];
    let outer: usize = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    let a_block = sa[axis] * inner;
    let b_block = sb[axis] * inner;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * a_block..(o + 1) * a_block]);
        data.extend_from_slice(&b.data()[o * b_block..(o + 1) * b_block]);
    }
    ValueGrid::from_vec(&out_shape, data).expect("shape computed")
}

fn concat_adjoint(
    sa: &[usize],
    sb: &[usize],
    axis: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let outer: usize = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    let a_block = sa[axis] * inner;
    let b_block = sb[axis] * inner;
    let mut da = Vec::with_capacity(outer * a_block);
    let mut db = Vec::with_capacity(outer * b_block);
    for o in 0..outer {
        let base = o * (a_block + b_block);
        da.extend_from_slice(&grad[base..base + a_block]);
        db.extend_from_slice(&grad[base + a_block..base + a_block + b_block]);
    }
    (da, db)
}

// ── Finite differences ──────────────────────────────────────────────────

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct FdCoordinate {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// True when the ±step probes crossed a non-smooth decision boundary
    /// (reduction-max winner, maximum branch, sampling cell, abs sign).
    pub excluded: bool,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub coords: Vec<FdCoordinate>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Builds the graph with `build`, reduces the output to a scalar sum, and
/// compares the analytic gradient of every input coordinate against central
/// finite differences of step `step`. Coordinates whose probes land on
/// different smooth pieces are excluded and reported as such.
pub fn finite_difference_check(
    build: impl Fn(&mut Tape, &[Var]) -> TapeResult<Var>,
    inputs: &[ValueGrid],
    step: f64,
    tolerance: f64,
) -> TapeResult<FdReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|g| tape.input(g.clone(), true))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = tape.sum_all(out);
    tape.backward_scalar(loss)?;
    let analytic: Vec<ValueGrid> = vars
        .iter()
        .map(|&v| tape.gradient(v))
        .collect::<TapeResult<_>>()?;

    let mut coords = Vec::new();
    let mut max_rel = 0.0f64;
    let mut excluded = 0usize;
    for (ii, base) in inputs.iter().enumerate() {
        for c in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[c] += step;
            let mut minus = base.clone();
            minus.data_mut()[c] -= step;
            let (vp, sig_p) = tape.replay(&[(vars[ii], &plus)], loss)?;
            let (vm, sig_m) = tape.replay(&[(vars[ii], &minus)], loss)?;
            let numeric = (vp.data()[0] - vm.data()[0]) / (2.0 * step);
            let a = analytic[ii].data()[c];
            let crossed = sig_p != sig_m;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if crossed {
                excluded += 1;
            } else {
                max_rel = max_rel.max(rel);
            }
            coords.push(FdCoordinate {
                input: ii,
                coord: c,
                analytic: a,
                numeric,
                rel_error: rel,
                excluded: crossed,
            });
        }
    }
    Ok(FdReport {
        checked: coords.len() - excluded,
        coords,
        max_rel_error: max_rel,
        excluded,
        tolerance,
    })
}
