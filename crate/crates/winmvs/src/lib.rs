//! Window-attention multi-view stereo.
//!
//! A desk-scale, double-precision implementation of a cascaded multi-view
//! stereo pipeline: feature pyramids, window-based epipolar cross-attention
//! between views, grouped-correlation plane-sweep cost volumes, transformer
//! cost-volume regularization, and geometric-consistency supervision —
//! trained and verified end-to-end on synthetic scenes with analytic ground
//! truth.
//!
//! The narrative guide lives under `book/`; its chapters are compiled as
//! doc-tests through the [`book`] module.

pub mod attention;
pub mod camera;
pub mod cost_volume;
pub mod epipolar_attention;
pub mod fpn;
pub mod fusion;
pub mod grid;
pub mod loss;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod regularizer;
pub mod scene;
pub mod tape;
