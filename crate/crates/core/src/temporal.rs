//! Temporal sampler: decide, from pre-scanned evidence, how many upcoming
//! frames deserve no computation at all.
//!
//! At every evaluated frame the policy sees the normalized attention map,
//! the hallucinated next-frame attention, and their SSIM, runs them through
//! a small GRU stack, and emits an (M+1)-way sampling vector via
//! Gumbel-softmax: entry 0 means "run the full pipeline now", entry m >= 1
//! means "stop after the pre-scan and skip the next m-1 frames".  The
//! straight-through trick keeps the hard one-hot decision differentiable
//! during training.  A warm-up step forces the first frame of every
//! sequence through the full pipeline so the recurrent state starts from
//! real evidence.

use crate::cost::FrameStatus;
use crate::nn::{gru_stack_step, GruStack, GruStackVars, Linear, LinearVars};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("policy input has {got} entries, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("sampling vector must not be empty")]
    EmptyVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Simplex-valued, used while training.
    Soft,
    /// One-hot straight-through argmax, used at inference.
    Hard,
}

/// The (M+1)-way skip decision distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingVector {
    pub r: Vec<f64>,
    pub mode: SamplingMode,
}

impl SamplingVector {
    /// `m* = argmax_m r[m]`, ties broken toward smaller m (less skipping).
    pub fn decide(&self) -> usize {
        decide(&self.r)
    }
}

/// First index of the maximum entry: ties resolve to the smaller index, i.e.
/// toward more computation.
pub fn decide(r: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v > r[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel noise `-ln(-ln(u))`, one draw per entry.
pub fn gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax on the tape: `softmax((logits + g) / tau)`, with the hard
/// mode wrapping the soft sample in a straight-through argmax (one-hot
/// forward, identity backward).  Pass `noise: None` for the deterministic
/// (noise-off) variant.  Returns the output var plus its value as a
/// [`SamplingVector`].
pub fn gumbel_softmax_on(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    noise: Option<&[f64]>,
    mode: SamplingMode,
) -> Result<(Var, SamplingVector), TemporalError> {
    if tau <= 0.0 {
        return Err(TemporalError::BadTemperature(tau));
    }
    let n = tape.value(logits).numel();
    if n == 0 {
        return Err(TemporalError::EmptyVector);
    }
    let perturbed = match noise {
        Some(g) => {
            if g.len() != n {
                return Err(TemporalError::DimMismatch {
                    expected: n,
                    got: g.len(),
                });
            }
            let gv = tape.constant(Tensor::from_vec(&[n], g.to_vec()).expect("noise vector"));
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let scaled = tape.mul_scalar(perturbed, 1.0 / tau);
    let soft = tape.softmax_last(scaled);
    let out = match mode {
        SamplingMode::Soft => soft,
        SamplingMode::Hard => tape.straight_through(soft)?,
    };
    let vector = SamplingVector {
        r: tape.value(out).data().to_vec(),
        mode,
    };
    Ok((out, vector))
}

/// Data-level Gumbel-softmax; same semantics, scratch tape.
pub fn gumbel_softmax(
    logits: &[f64],
    tau: f64,
    noise: bool,
    rng: &mut impl Rng,
    mode: SamplingMode,
) -> Result<SamplingVector, TemporalError> {
    let g = if noise {
        Some(gumbel_noise(logits.len(), rng))
    } else {
        None
    };
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(&[logits.len()], logits.to_vec()).expect("logits"));
    let (_, v) = gumbel_softmax_on(&mut tape, l, tau, g.as_deref(), mode)?;
    Ok(v)
}

/// Skip policy: a GRU stack over the concatenated evidence, topped by a
/// linear head emitting M+1 logits.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub gru: GruStack,
    pub head: Linear,
}

pub struct PolicyVars {
    pub gru: GruStackVars,
    pub head: LinearVars,
}

impl PolicyParams {
    pub fn new(in_dim: usize, hidden: usize, layers: usize, m: usize, rng: &mut impl Rng) -> Self {
        PolicyParams {
            gru: GruStack::new(in_dim, hidden, layers, rng),
            head: Linear::new(hidden, m + 1, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.gru.layers[0].in_dim()
    }

    /// Maximum skip range M (the head emits M+1 logits).
    pub fn m(&self) -> usize {
        self.head.b.numel() - 1
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.gru.tensors();
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.gru.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> PolicyVars {
        PolicyVars {
            gru: self.gru.leaf_on(tape, trainable),
            head: self.head.leaf_on(tape, trainable),
        }
    }
}

impl PolicyVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.gru.vars();
        v.extend(self.head.vars());
        v
    }
}

/// Per-sequence policy state: recurrent memory plus the bookkeeping for a
/// skip already in flight.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub hidden: Vec<Tensor>,
    pub last_decision: Option<usize>,
    /// Frames still to skip before the policy is consulted again; stays in
    /// `[0, M-1]`.
    pub remaining_skips: usize,
}

impl SamplerState {
    pub fn zeros(params: &PolicyParams) -> Self {
        SamplerState {
            hidden: params.gru.zero_state(),
            last_decision: None,
            remaining_skips: 0,
        }
    }
}

/// Assemble the policy input: `[attention | hallucination | ssim]`.
pub fn policy_input(attention: &[f64], hallucination: &[f64], ssim_score: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(attention.len() + hallucination.len() + 1);
    v.extend_from_slice(attention);
    v.extend_from_slice(hallucination);
    v.push(ssim_score);
    v
}

/// One policy step on the tape.  Returns (sampling vector var, new hidden
/// state vars, value copy).
pub fn policy_forward_on(
    tape: &mut Tape,
    input: Var,
    state: &[Var],
    vars: &PolicyVars,
    tau: f64,
    noise: Option<&[f64]>,
    mode: SamplingMode,
) -> Result<(Var, Vec<Var>, SamplingVector), TemporalError> {
    let new_state = gru_stack_step(tape, &vars.gru, input, state)?;
    let last = *new_state.last().expect("stack has layers");
    let logits = vars.head.forward(tape, last)?;
    let (out, vector) = gumbel_softmax_on(tape, logits, tau, noise, mode)?;
    Ok((out, new_state, vector))
}

/// One policy step on plain data; deterministic when `noise` is off.
#[allow(clippy::too_many_arguments)]
pub fn policy_forward(
    attention: &[f64],
    hallucination: &[f64],
    ssim_score: f64,
    state: &SamplerState,
    params: &PolicyParams,
    tau: f64,
    noise: bool,
    rng: &mut impl Rng,
    mode: SamplingMode,
) -> Result<(SamplingVector, SamplerState), TemporalError> {
    let input = policy_input(attention, hallucination, ssim_score);
    if input.len() != params.in_dim() {
        return Err(TemporalError::DimMismatch {
            expected: params.in_dim(),
            got: input.len(),
        });
    }
    let g = if noise {
        Some(gumbel_noise(params.m() + 1, rng))
    } else {
        None
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[input.len()], input).expect("policy input"));
    let state_vars: Vec<Var> = state
        .hidden
        .iter()
        .map(|h| tape.constant(h.clone()))
        .collect();
    let vars = params.leaf_on(&mut tape, false);
    let (_, new_state, vector) =
        policy_forward_on(&mut tape, x, &state_vars, &vars, tau, g.as_deref(), mode)?;
    let decision = vector.decide();
    Ok((
        vector,
        SamplerState {
            hidden: new_state
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            last_decision: Some(decision),
            remaining_skips: state.remaining_skips,
        },
    ))
}

/// One frame's disposition and its FLOPS charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDecision {
    pub status: FrameStatus,
    pub flops_charged: f64,
    /// Frame whose full-inference prediction this frame reports (itself for
    /// FULL frames, the latest FULL frame otherwise).
    pub source_frame: usize,
}

impl FrameDecision {
    pub fn charge_pair(&self) -> (FrameStatus, f64) {
        (self.status, self.flops_charged)
    }
}

/// Walk a T-frame sequence, consulting `decide_at(frame)` wherever a
/// decision is due, and lay out the resulting schedule.
///
/// Frame 0 is the warm-up: forced FULL, no decision consumed.  A decision of
/// 0 runs the frame fully; a decision m in [1, M] pre-scans the frame and
/// skips the next m-1 outright.  Decisions are clamped to [0, M].  FULL
/// frames charge `o_full`, PRESCAN frames `o_pre`, SKIP frames nothing, and
/// every non-FULL frame reports the latest FULL frame as its prediction
/// source (hold-last propagation).
pub fn execute_schedule<F>(
    t: usize,
    m_max: usize,
    o_full: f64,
    o_pre: f64,
    mut decide_at: F,
) -> Vec<FrameDecision>
where
    F: FnMut(usize) -> usize,
{
    let mut out = Vec::with_capacity(t);
    let mut last_full = 0usize;
    let mut frame = 0usize;
    while frame < t {
        if frame == 0 {
            out.push(FrameDecision {
                status: FrameStatus::Full,
                flops_charged: o_full,
                source_frame: 0,
            });
            frame = 1;
            continue;
        }
        let m_star = decide_at(frame).min(m_max);
        if m_star == 0 {
            last_full = frame;
            out.push(FrameDecision {
                status: FrameStatus::Full,
                flops_charged: o_full,
                source_frame: frame,
            });
            frame += 1;
        } else {
            out.push(FrameDecision {
                status: FrameStatus::Prescan,
                flops_charged: o_pre,
                source_frame: last_full,
            });
            frame += 1;
            for _ in 0..m_star - 1 {
                if frame >= t {
                    break;
                }
                out.push(FrameDecision {
                    status: FrameStatus::Skip,
                    flops_charged: 0.0,
                    source_frame: last_full,
                });
                frame += 1;
            }
        }
    }
    out
}
