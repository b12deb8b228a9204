//! The gradient-check registry: every trainable construct in the crate wired
//! through the finite-difference harness with deterministic inputs.
//!
//! Each case carries a twin whose analytic pass adds a constant bias to the
//! loss that the finite-difference evaluations never see — a negative control
//! proving the harness detects wrong gradients rather than passing anything.

use crate::gradcheck::{check_gradients, GradCheckError, RegistryCase};
use crate::hallucinator::{belief_loss_on, hallucinate_step_on, ssim_on, HallucinatorError,
    HallucinatorParams, HallucinatorVars, SsimParams};
use crate::nn::{gru_stack_step, GruStackVars, GruVars, LinearVars};
use crate::pipeline::{class_loss_on, PipelineError};
use crate::tape::{Tape, TapeError, Var};
use crate::temporal::{gumbel_softmax_on, policy_forward_on, PolicyParams, PolicyVars,
    SamplingMode, TemporalError};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::rc::Rc;

/// Gradient offset injected by the negative control; must sit far above the
/// harness tolerance so the corrupted entry always fails.
const GRAD_BIAS: f64 = 0.05;

fn t_rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// Scalar readout with fixed pseudo-random weights, so the loss is sensitive
/// to every output coordinate with a distinct coefficient.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, TapeError> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(t_rand(&shape, -1.0, 1.0, seed));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum_all(prod))
}

type Build = Rc<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>>;

/// Pair a gradient check with its corrupted twin.  The bias lands on the
/// first graph construction only — the analytic pass — so the tape reports
/// gradients shifted by [`GRAD_BIAS`] everywhere while finite differences see
/// the clean loss.
fn case(params: Vec<Tensor>, build: Build) -> RegistryCase {
    let clean_params = params.clone();
    let clean_build = Rc::clone(&build);
    let run = Box::new(move || check_gradients(&clean_params, |t, v| clean_build(t, v)));
    let run_biased = Box::new(move || -> Result<f64, GradCheckError> {
        let analytic_pass = Cell::new(true);
        check_gradients(&params, |t, v| {
            let loss = build(t, v)?;
            if !analytic_pass.replace(false) {
                return Ok(loss);
            }
            let mut extra = t.constant_scalar(0.0);
            for &var in v {
                let s = t.sum_all(var);
                extra = t.add(extra, s)?;
            }
            let bias = t.mul_scalar(extra, GRAD_BIAS);
            t.add(loss, bias)
        })
    });
    RegistryCase { run, run_biased }
}

fn from_hall(e: HallucinatorError) -> TapeError {
    match e {
        HallucinatorError::Tape(t) => t,
        other => unreachable!("fixed inputs cannot raise {other}"),
    }
}

fn from_temporal(e: TemporalError) -> TapeError {
    match e {
        TemporalError::Tape(t) => t,
        other => unreachable!("fixed inputs cannot raise {other}"),
    }
}

fn from_pipeline(e: PipelineError) -> TapeError {
    match e {
        PipelineError::Tape(t) => t,
        other => unreachable!("fixed inputs cannot raise {other}"),
    }
}

fn conv2d_case() -> RegistryCase {
    let params = vec![
        t_rand(&[2, 5, 5], -1.0, 1.0, 0xC0),
        t_rand(&[3, 2, 3, 3], -0.4, 0.4, 0xC1),
        t_rand(&[3], -0.2, 0.2, 0xC2),
    ];
    case(
        params,
        Rc::new(|t, v| {
            let conv = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            probe(t, conv, 0xC3)
        }),
    )
}

fn gru_cell_case() -> RegistryCase {
    let (in_dim, hidden) = (5usize, 4usize);
    let mut params = Vec::new();
    for (i, shape) in [
        [hidden, in_dim].as_slice(),
        &[hidden, hidden],
        &[hidden],
        &[hidden, in_dim],
        &[hidden, hidden],
        &[hidden],
        &[hidden, in_dim],
        &[hidden, hidden],
        &[hidden],
    ]
    .iter()
    .enumerate()
    {
        params.push(t_rand(shape, -0.8, 0.8, 0xD0 + i as u64));
    }
    params.push(t_rand(&[in_dim], -1.0, 1.0, 0xDA));
    params.push(t_rand(&[hidden], -1.0, 1.0, 0xDB));
    case(
        params,
        Rc::new(|t, v| {
            let stack = GruStackVars {
                layers: vec![GruVars {
                    w_z: v[0],
                    u_z: v[1],
                    b_z: v[2],
                    w_r: v[3],
                    u_r: v[4],
                    b_r: v[5],
                    w_n: v[6],
                    u_n: v[7],
                    b_n: v[8],
                }],
            };
            let next = gru_stack_step(t, &stack, v[9], &[v[10]])?;
            probe(t, next[0], 0xDC)
        }),
    )
}

fn hallucinator_vars(v: &[Var]) -> HallucinatorVars {
    HallucinatorVars {
        enc_w: v[0],
        enc_b: v[1],
        w_xi: v[2],
        w_hi: v[3],
        b_i: v[4],
        w_xf: v[5],
        w_hf: v[6],
        b_f: v[7],
        w_xo: v[8],
        w_ho: v[9],
        b_o: v[10],
        w_xg: v[11],
        w_hg: v[12],
        b_g: v[13],
        dec_w: v[14],
        dec_b: v[15],
    }
}

fn conv_lstm_case() -> RegistryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let hall = HallucinatorParams::new(2, 3, &mut rng);
    let mut params: Vec<Tensor> = hall.tensors().into_iter().cloned().collect();
    params.push(t_rand(&[2, 4, 4], 0.05, 1.0, 0xE1));
    params.push(t_rand(&[3, 4, 4], -0.5, 0.5, 0xE2));
    params.push(t_rand(&[3, 4, 4], -0.5, 0.5, 0xE3));
    case(
        params,
        Rc::new(|t, v| {
            let hv = hallucinator_vars(v);
            let (pred, h_new, c_new) = hallucinate_step_on(t, v[16], v[17], v[18], &hv)?;
            let lp = probe(t, pred, 0xE4)?;
            let lh = probe(t, h_new, 0xE5)?;
            let lc = probe(t, c_new, 0xE6)?;
            let sum = t.add(lp, lh)?;
            t.add(sum, lc)
        }),
    )
}

fn encoder_decoder_case() -> RegistryCase {
    let params = vec![
        t_rand(&[3, 2, 3, 3], -0.4, 0.4, 0xF0),
        t_rand(&[3], -0.2, 0.2, 0xF1),
        t_rand(&[2, 3, 3, 3], -0.4, 0.4, 0xF2),
        t_rand(&[2], -0.2, 0.2, 0xF3),
        t_rand(&[2, 4, 4], -1.0, 1.0, 0xF4),
    ];
    case(
        params,
        Rc::new(|t, v| {
            let enc = t.conv2d(v[4], v[0], v[1], 1, 1)?;
            let act = t.tanh(enc);
            let dec = t.conv2d(act, v[2], v[3], 1, 1)?;
            probe(t, dec, 0xF5)
        }),
    )
}

fn ssim_case() -> RegistryCase {
    let params = vec![
        t_rand(&[3, 5, 5], 0.05, 1.0, 0xA0),
        t_rand(&[3, 5, 5], 0.05, 1.0, 0xA1),
    ];
    case(
        params,
        Rc::new(|t, v| ssim_on(t, v[0], v[1], SsimParams::new(1.0))),
    )
}

fn belief_loss_case() -> RegistryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let hall = HallucinatorParams::new(2, 3, &mut rng);
    let params: Vec<Tensor> = hall.tensors().into_iter().cloned().collect();
    let stream: Vec<Tensor> = (0..3)
        .map(|i| t_rand(&[2, 4, 4], 0.05, 1.0, 0xB1 + i))
        .collect();
    case(
        params,
        Rc::new(move |t, v| {
            let hv = hallucinator_vars(v);
            belief_loss_on(t, &stream, &hv, SsimParams::new(1.0)).map_err(from_hall)
        }),
    )
}

fn gumbel_softmax_case() -> RegistryCase {
    let params = vec![t_rand(&[4], -1.0, 1.0, 0x90)];
    case(
        params,
        Rc::new(|t, v| {
            let (soft, _) =
                gumbel_softmax_on(t, v[0], 0.7, None, SamplingMode::Soft).map_err(from_temporal)?;
            probe(t, soft, 0x91)
        }),
    )
}

fn policy_head_case() -> RegistryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0x80);
    let policy = PolicyParams::new(7, 5, 1, 3, &mut rng);
    let mut params: Vec<Tensor> = policy.tensors().into_iter().cloned().collect();
    params.push(t_rand(&[7], -1.0, 1.0, 0x81));
    params.push(t_rand(&[5], -0.7, 0.7, 0x82));
    case(
        params,
        Rc::new(|t, v| {
            let pv = PolicyVars {
                gru: GruStackVars {
                    layers: vec![GruVars {
                        w_z: v[0],
                        u_z: v[1],
                        b_z: v[2],
                        w_r: v[3],
                        u_r: v[4],
                        b_r: v[5],
                        w_n: v[6],
                        u_n: v[7],
                        b_n: v[8],
                    }],
                },
                head: LinearVars { w: v[9], b: v[10] },
            };
            let (r, state, _) =
                policy_forward_on(t, v[11], &[v[12]], &pv, 0.9, None, SamplingMode::Soft)
                    .map_err(from_temporal)?;
            let lr = probe(t, r, 0x83)?;
            let ls = probe(t, state[0], 0x84)?;
            t.add(lr, ls)
        }),
    )
}

fn cross_entropy_heads_case() -> RegistryCase {
    let params = vec![
        t_rand(&[3], -2.0, 2.0, 0x70),
        t_rand(&[3], -2.0, 2.0, 0x71),
        t_rand(&[3], -2.0, 2.0, 0x72),
    ];
    case(
        params,
        Rc::new(|t, v| {
            class_loss_on(t, &[v[0], v[1], v[2]], 1, [0.5, 0.3, 0.2]).map_err(from_pipeline)
        }),
    )
}

pub(crate) fn all() -> Vec<(&'static str, RegistryCase)> {
    vec![
        ("conv2d", conv2d_case()),
        ("gru-cell", gru_cell_case()),
        ("conv-lstm-step", conv_lstm_case()),
        ("encoder-decoder", encoder_decoder_case()),
        ("ssim", ssim_case()),
        ("belief-loss", belief_loss_case()),
        ("gumbel-softmax", gumbel_softmax_case()),
        ("policy-head", policy_head_case()),
        ("cross-entropy-heads", cross_entropy_heads_case()),
    ]
}
