//! Adaptive spatiotemporal sampling for video recognition, scaled down to run
//! end-to-end on synthetic data in minutes.
//!
//! The system computes a cheap low-resolution "pre-scan" of each frame through
//! the first half of a backbone whose self-attention block exposes a cumulative
//! attention map.  That map drives two samplers: a spatial sampler that crops
//! the most attended regions from the original frame, and a temporal sampler
//! that compares the map against a conv-LSTM hallucination of it and decides
//! whether the rest of the network (and the next few frames) can be skipped.
//! A cost model keeps exact FLOPS books so the accuracy/computation trade-off
//! is measurable rather than anecdotal.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`optim`], [`nn`]: dense f64 tensors, reverse-mode
//!   autodiff, SGD with momentum, recurrent cells.
//! - [`attention`]: pairwise self-attention with per-channel footprint softmax
//!   and cumulative attention aggregation.
//! - [`spatial`]: attention-guided region extraction and crop projection.
//! - [`hallucinator`]: conv-LSTM attention forecaster and the SSIM metric.
//! - [`temporal`]: Gumbel-softmax skip policy and schedule execution.
//! - [`cost`]: per-layer FLOPS accounting, efficiency loss, derived metrics.
//! - [`pipeline`]: synthetic dataset, toy backbone, three-head classifier,
//!   training phases, evaluation, fixture/checkpoint formats.
//! - [`config`]: flat key=value run configuration.
//! - [`gradcheck`]: finite-difference verification of every differentiable op.

pub mod attention;
pub mod config;
pub mod cost;
pub mod gradcheck;
mod gradcases;
pub mod hallucinator;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod spatial;
pub mod tape;
pub mod temporal;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
