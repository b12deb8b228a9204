//! Attention hallucinator: a conv-LSTM that predicts the next frame's
//! attention map from the current one, plus the SSIM metric it trains
//! against.
//!
//! The skip policy needs to know whether anything is about to change.  The
//! hallucinator answers that by dreaming one frame ahead: encoder conv →
//! conv-LSTM cell → decoder conv, trained with teacher forcing to maximize
//! the structural similarity (SSIM) between the dreamed map and the next
//! observed map.  SSIM moments are whole-map per channel (the maps are far
//! smaller than the standard sliding window) and both inputs are
//! max-normalized per frame, so the score ignores scale and lands in
//! [-1, 1] — [0, 1] in practice for nonnegative attention.

use crate::attention::AttentionMap;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HallucinatorError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("attention map shape {got:?} does not match hallucinator input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("belief loss needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"HALC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint payload ended early")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
}

/// SSIM stabilizers, derived from the dynamic range `l` (1 after per-frame
/// max-normalization): `c1 = (0.01 l)^2`, `c2 = (0.03 l)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub l: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub fn new(l: f64) -> Self {
        SsimParams {
            l,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams::new(1.0)
    }
}

/// Conv-LSTM recurrent state; `h` is tanh-gated so its entries stay in
/// (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(c_h: usize, h: usize, w: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[c_h, h, w]),
            c: Tensor::zeros(&[c_h, h, w]),
        }
    }
}

/// Encoder conv, conv-LSTM gate convs (input/forget/output/candidate, each
/// fed by the encoded input and the hidden state), and decoder conv.  All
/// convs are 3x3 with padding 1, so spatial dims never change.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinatorParams {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xg: Tensor,
    pub w_hg: Tensor,
    pub b_g: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

impl HallucinatorParams {
    pub fn new(c_in: usize, c_h: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(c_in, c_h);
        for t in p.tensors_mut() {
            // Weights get uniform +-1/sqrt(fan_in); biases stay zero.
            if t.shape().len() == 4 {
                let fan_in: usize = t.shape()[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                *t = Tensor::rand_uniform(&t.shape().to_vec(), -bound, bound, rng);
            }
        }
        p
    }

    pub fn zeros(c_in: usize, c_h: usize) -> Self {
        let gate = || Tensor::zeros(&[c_h, c_h, 3, 3]);
        let bias = || Tensor::zeros(&[c_h]);
        HallucinatorParams {
            enc_w: Tensor::zeros(&[c_h, c_in, 3, 3]),
            enc_b: bias(),
            w_xi: gate(),
            w_hi: gate(),
            b_i: bias(),
            w_xf: gate(),
            w_hf: gate(),
            b_f: bias(),
            w_xo: gate(),
            w_ho: gate(),
            b_o: bias(),
            w_xg: gate(),
            w_hg: gate(),
            b_g: bias(),
            dec_w: Tensor::zeros(&[c_in, c_h, 3, 3]),
            dec_b: Tensor::zeros(&[c_in]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.enc_w.shape()[1]
    }

    pub fn c_h(&self) -> usize {
        self.enc_w.shape()[0]
    }

    /// Checkpoint/declaration order; do not reorder.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.enc_w, &self.enc_b, &self.w_xi, &self.w_hi, &self.b_i, &self.w_xf, &self.w_hf,
            &self.b_f, &self.w_xo, &self.w_ho, &self.b_o, &self.w_xg, &self.w_hg, &self.b_g,
            &self.dec_w, &self.dec_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_w, &mut self.enc_b, &mut self.w_xi, &mut self.w_hi, &mut self.b_i,
            &mut self.w_xf, &mut self.w_hf, &mut self.b_f, &mut self.w_xo, &mut self.w_ho,
            &mut self.b_o, &mut self.w_xg, &mut self.w_hg, &mut self.b_g, &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> HallucinatorVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HallucinatorVars {
            enc_w: put(&self.enc_w),
            enc_b: put(&self.enc_b),
            w_xi: put(&self.w_xi),
            w_hi: put(&self.w_hi),
            b_i: put(&self.b_i),
            w_xf: put(&self.w_xf),
            w_hf: put(&self.w_hf),
            b_f: put(&self.b_f),
            w_xo: put(&self.w_xo),
            w_ho: put(&self.w_ho),
            b_o: put(&self.b_o),
            w_xg: put(&self.w_xg),
            w_hg: put(&self.w_hg),
            b_g: put(&self.b_g),
            dec_w: put(&self.dec_w),
            dec_b: put(&self.dec_b),
        }
    }
}

pub struct HallucinatorVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub w_xi: Var,
    pub w_hi: Var,
    pub b_i: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub b_f: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub b_o: Var,
    pub w_xg: Var,
    pub w_hg: Var,
    pub b_g: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl HallucinatorVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.enc_w, self.enc_b, self.w_xi, self.w_hi, self.b_i, self.w_xf, self.w_hf,
            self.b_f, self.w_xo, self.w_ho, self.b_o, self.w_xg, self.w_hg, self.b_g, self.dec_w,
            self.dec_b,
        ]
    }
}

/// One conv-LSTM step on the tape: encode the map, run the gates, decode the
/// new hidden state.  Returns (prediction, h', c').
pub fn hallucinate_step_on(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    v: &HallucinatorVars,
) -> Result<(Var, Var, Var), TapeError> {
    let c_h = tape.value(v.enc_b).numel();
    let zero_bias = tape.constant(Tensor::zeros(&[c_h]));
    let e = tape.conv2d(x, v.enc_w, v.enc_b, 1, 1)?;
    let gate = |wx: Var, wh: Var, b: Var, tape: &mut Tape| -> Result<Var, TapeError> {
        let from_x = tape.conv2d(e, wx, b, 1, 1)?;
        let from_h = tape.conv2d(h, wh, zero_bias, 1, 1)?;
        tape.add(from_x, from_h)
    };
    let i_pre = gate(v.w_xi, v.w_hi, v.b_i, tape)?;
    let f_pre = gate(v.w_xf, v.w_hf, v.b_f, tape)?;
    let o_pre = gate(v.w_xo, v.w_ho, v.b_o, tape)?;
    let g_pre = gate(v.w_xg, v.w_hg, v.b_g, tape)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    let pred = tape.conv2d(h_new, v.dec_w, v.dec_b, 1, 1)?;
    Ok((pred, h_new, c_new))
}

/// One hallucination step on plain data.  The prediction keeps the input
/// map's provenance tag.
pub fn hallucinate_step(
    a: &AttentionMap,
    state: &ConvLstmState,
    params: &HallucinatorParams,
) -> Result<(AttentionMap, ConvLstmState), HallucinatorError> {
    let shape = a.data.shape();
    if shape.len() != 3 || shape[0] != params.c_in() {
        return Err(HallucinatorError::ShapeMismatch {
            expected: vec![params.c_in(), state.h.shape()[1], state.h.shape()[2]],
            got: shape.to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(a.data.clone());
    let h = tape.constant(state.h.clone());
    let c = tape.constant(state.c.clone());
    let vars = params.leaf_on(&mut tape, false);
    let (pred, h_new, c_new) = hallucinate_step_on(&mut tape, x, h, c, &vars)?;
    Ok((
        AttentionMap {
            data: tape.value(pred).clone(),
            provenance: a.provenance,
        },
        ConvLstmState {
            h: tape.value(h_new).clone(),
            c: tape.value(c_new).clone(),
        },
    ))
}

/// Divide by the map maximum so values land in [0,1]; an all-zero (or
/// non-positive) map passes through unchanged.
pub fn max_normalize_on(tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
    let m = tape.max_all(x);
    if tape.value(m).item() > 0.0 {
        let inv = tape.recip(m)?;
        tape.scale_by(x, inv)
    } else {
        Ok(x)
    }
}

/// Data-level max-normalization with the same semantics.
pub fn max_normalize(t: &Tensor) -> Tensor {
    let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m > 0.0 {
        Tensor::from_vec(t.shape(), t.data().iter().map(|v| v / m).collect()).expect("same shape")
    } else {
        t.clone()
    }
}

/// SSIM between two maps on the tape, after the mandated per-frame
/// max-normalization.  Moments are whole-map per channel; channel scores are
/// averaged.
pub fn ssim_on(tape: &mut Tape, a: Var, b: Var, p: SsimParams) -> Result<Var, TapeError> {
    let shape = tape.value(a).shape().to_vec();
    if shape != tape.value(b).shape() {
        return Err(TapeError::ShapeMismatch {
            op: "ssim",
            left: shape,
            right: tape.value(b).shape().to_vec(),
        });
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let a = max_normalize_on(tape, a)?;
    let b = max_normalize_on(tape, b)?;
    let af = tape.reshape(a, &[c, hw])?;
    let bf = tape.reshape(b, &[c, hw])?;
    let inv_n = 1.0 / hw as f64;
    let mean_last = |x: Var, tape: &mut Tape| -> Result<Var, TapeError> {
        let s = tape.sum_last(x)?;
        Ok(tape.mul_scalar(s, inv_n))
    };
    let mu_a = mean_last(af, tape)?;
    let mu_b = mean_last(bf, tape)?;
    let aa = tape.mul(af, af)?;
    let bb = tape.mul(bf, bf)?;
    let ab = tape.mul(af, bf)?;
    let e_aa = mean_last(aa, tape)?;
    let e_bb = mean_last(bb, tape)?;
    let e_ab = mean_last(ab, tape)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;
    // ((2 mu_a mu_b + c1)(2 cov + c2)) / ((mu_a^2 + mu_b^2 + c1)(var_a + var_b + c2))
    let two_mu = tape.mul_scalar(mu_ab, 2.0);
    let num1 = tape.add_scalar(two_mu, p.c1);
    let two_cov = tape.mul_scalar(cov, 2.0);
    let num2 = tape.add_scalar(two_cov, p.c2);
    let num = tape.mul(num1, num2)?;
    let mu_sq = tape.add(mu_aa, mu_bb)?;
    let den1 = tape.add_scalar(mu_sq, p.c1);
    let var_sum = tape.add(var_a, var_b)?;
    let den2 = tape.add_scalar(var_sum, p.c2);
    let den = tape.mul(den1, den2)?;
    let per_channel = tape.div(num, den)?;
    Ok(tape.mean_all(per_channel))
}

/// SSIM on plain data; wraps the tape implementation so there is exactly one
/// code path for the metric.
pub fn ssim(a: &AttentionMap, b: &AttentionMap, p: SsimParams) -> Result<f64, HallucinatorError> {
    let mut tape = Tape::new();
    let av = tape.constant(a.data.clone());
    let bv = tape.constant(b.data.clone());
    let s = ssim_on(&mut tape, av, bv, p)?;
    Ok(tape.value(s).item())
}

/// Teacher-forced per-transition SSIM terms under an arbitrary one-step
/// predictor: term t is `predict(A_t)` scored against `A_{t+1}`.  The real
/// belief loss, oracle predictors, and the copy baseline all share this
/// seam.
pub fn belief_terms_with<F>(
    seq: &[AttentionMap],
    p: SsimParams,
    mut predict: F,
) -> Result<Vec<f64>, HallucinatorError>
where
    F: FnMut(&AttentionMap) -> Result<AttentionMap, HallucinatorError>,
{
    if seq.len() < 2 {
        return Err(HallucinatorError::TooShort(seq.len()));
    }
    let mut terms = Vec::with_capacity(seq.len() - 1);
    for t in 0..seq.len() - 1 {
        let pred = predict(&seq[t])?;
        terms.push(ssim(&pred, &seq[t + 1], p)?);
    }
    Ok(terms)
}

/// Negated mean of per-transition SSIM terms.
pub fn belief_from_terms(terms: &[f64]) -> f64 {
    -terms.iter().sum::<f64>() / terms.len() as f64
}

/// The hallucinator's per-transition SSIM terms with teacher forcing: the
/// recurrent state advances on ground truth, never on its own predictions.
pub fn belief_loss_terms(
    seq: &[AttentionMap],
    params: &HallucinatorParams,
    p: SsimParams,
) -> Result<Vec<f64>, HallucinatorError> {
    if seq.len() < 2 {
        return Err(HallucinatorError::TooShort(seq.len()));
    }
    let shape = seq[0].data.shape();
    let mut state = ConvLstmState::zeros(params.c_h(), shape[1], shape[2]);
    let mut terms = Vec::with_capacity(seq.len() - 1);
    for t in 0..seq.len() - 1 {
        let (pred, next) = hallucinate_step(&seq[t], &state, params)?;
        state = next;
        terms.push(ssim(&pred, &seq[t + 1], p)?);
    }
    Ok(terms)
}

/// Belief loss `-(1/(T-1)) * sum_t ssim(H(A_t), A_{t+1})` on plain data.
pub fn belief_loss(
    seq: &[AttentionMap],
    params: &HallucinatorParams,
    p: SsimParams,
) -> Result<f64, HallucinatorError> {
    Ok(belief_from_terms(&belief_loss_terms(seq, params, p)?))
}

/// Belief loss on the tape for training; the sequence enters as constants.
pub fn belief_loss_on(
    tape: &mut Tape,
    seq: &[Tensor],
    vars: &HallucinatorVars,
    p: SsimParams,
) -> Result<Var, HallucinatorError> {
    if seq.len() < 2 {
        return Err(HallucinatorError::TooShort(seq.len()));
    }
    let dims = seq[0].shape();
    let c_h = tape.value(vars.enc_b).numel();
    let mut h = tape.constant(Tensor::zeros(&[c_h, dims[1], dims[2]]));
    let mut c = tape.constant(Tensor::zeros(&[c_h, dims[1], dims[2]]));
    let mut terms = Vec::with_capacity(seq.len() - 1);
    for t in 0..seq.len() - 1 {
        let x = tape.constant(seq[t].clone());
        let target = tape.constant(seq[t + 1].clone());
        let (pred, h_new, c_new) = hallucinate_step_on(tape, x, h, c, vars)?;
        h = h_new;
        c = c_new;
        terms.push(ssim_on(tape, pred, target, p)?);
    }
    let stacked = tape.concat_vec(&terms)?;
    let mean = tape.mean_all(stacked);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// Train with per-sequence SGD steps.  The returned curve has `epochs + 1`
/// entries: entry 0 is the pre-training evaluation, entry e the mean
/// training loss over epoch e.  Zero epochs evaluates and changes nothing.
pub fn train_hallucinator(
    seqs: &[Vec<AttentionMap>],
    params: &mut HallucinatorParams,
    epochs: usize,
    lr: f64,
    momentum: f64,
    p: SsimParams,
) -> Result<Vec<f64>, HallucinatorError> {
    if seqs.is_empty() {
        return Err(HallucinatorError::EmptyDataset);
    }
    let data: Vec<Vec<Tensor>> = seqs
        .iter()
        .map(|s| s.iter().map(|a| a.data.clone()).collect())
        .collect();
    let mut curve = Vec::with_capacity(epochs + 1);
    let initial: f64 = seqs
        .iter()
        .map(|s| belief_loss(s, params, p))
        .sum::<Result<f64, _>>()?
        / seqs.len() as f64;
    curve.push(initial);
    let mut opt = crate::optim::SgdMomentum::new(lr, momentum);
    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        for seq in &data {
            let mut tape = Tape::new();
            let vars = params.leaf_on(&mut tape, true);
            let loss = belief_loss_on(&mut tape, seq, &vars, p)?;
            epoch_loss += tape.value(loss).item();
            tape.backward(loss)?;
            let grads = crate::nn::grads_of(&tape, &vars.vars());
            let mut tensors = params.tensors_mut();
            opt.step(&mut tensors, &grads.iter().collect::<Vec<_>>())
                .expect("stable param set");
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

const CKPT_MAGIC: &[u8; 4] = b"HALC";
const CKPT_VERSION: u8 = 1;

/// Write params as magic, version, u32 LE dims (c_in, c_h), then every
/// parameter tensor as little-endian f64 in declaration order.
pub fn save_checkpoint(path: &Path, params: &HallucinatorParams) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.extend_from_slice(&(params.c_in() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.c_h() as u32).to_le_bytes());
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<HallucinatorParams, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        if at + n > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(4)?.try_into().expect("4 bytes");
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = take(1)?[0];
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let c_in = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let c_h = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut params = HallucinatorParams::zeros(c_in, c_h);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
    }
    if at != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - at));
    }
    Ok(params)
}

/// Synthetic attention sequences for hallucinator training: a Gaussian bump
/// translating one cell per frame (wrapping at the border), with a fixed
/// random gain per channel.  Deterministic in the seed.
pub fn translating_blob_sequences(
    n: usize,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<Vec<AttentionMap>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start_r = rng.random_range(0..h) as f64;
            let start_c = rng.random_range(0..w) as f64;
            let (dr, dc) = match rng.random_range(0..4u8) {
                0 => (0.0, 1.0),
                1 => (0.0, -1.0),
                2 => (1.0, 0.0),
                _ => (-1.0, 0.0),
            };
            let gains: Vec<f64> = (0..c).map(|_| 0.5 + rng.random::<f64>()).collect();
            (0..t)
                .map(|step| {
                    let cr = (start_r + dr * step as f64).rem_euclid(h as f64);
                    let cc = (start_c + dc * step as f64).rem_euclid(w as f64);
                    let mut map = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                // Wrapped distance so the bump stays whole at
                                // the border.
                                let di = (i as f64 - cr).abs().min(h as f64 - (i as f64 - cr).abs());
                                let dj = (j as f64 - cc).abs().min(w as f64 - (j as f64 - cc).abs());
                                let v = gains[ch] * (-(di * di + dj * dj) / 2.0).exp();
                                map.set3(ch, i, j, v);
                            }
                        }
                    }
                    AttentionMap::raw(map)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> AttentionMap {
        AttentionMap::raw(Tensor::rand_uniform(shape, lo, hi, r))
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut r = rng(30);
        let p = SsimParams::default();
        let a = random_map(&[4, 5, 5], 0.0, 1.0, &mut r);
        assert!((ssim(&a, &a, p).unwrap() - 1.0).abs() <= 1e-12);
        // Two constant maps normalize to all-ones; zero maps stay zero.
        let c1 = AttentionMap::raw(Tensor::filled(&[2, 3, 3], 0.4));
        let c2 = AttentionMap::raw(Tensor::filled(&[2, 3, 3], 7.0));
        assert!((ssim(&c1, &c2, p).unwrap() - 1.0).abs() <= 1e-12);
        let z = AttentionMap::raw(Tensor::zeros(&[2, 3, 3]));
        assert!((ssim(&z, &z, p).unwrap() - 1.0).abs() <= 1e-12);
    }

    /// Textbook SSIM with two-pass moments, computed without the tape.
    fn ssim_oracle(a: &Tensor, b: &Tensor, p: SsimParams) -> f64 {
        let an = max_normalize(a);
        let bn = max_normalize(b);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = (h * w) as f64;
        let mut total = 0.0;
        for ch in 0..c {
            let cells = |t: &Tensor| -> Vec<f64> {
                (0..h)
                    .flat_map(|i| (0..w).map(move |j| (i, j)))
                    .map(|(i, j)| t.at3(ch, i, j))
                    .collect()
            };
            let xs = cells(&an);
            let ys = cells(&bn);
            let mu_x: f64 = xs.iter().sum::<f64>() / n;
            let mu_y: f64 = ys.iter().sum::<f64>() / n;
            let var_x: f64 = xs.iter().map(|x| (x - mu_x).powi(2)).sum::<f64>() / n;
            let var_y: f64 = ys.iter().map(|y| (y - mu_y).powi(2)).sum::<f64>() / n;
            let cov: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mu_x) * (y - mu_y))
                .sum::<f64>()
                / n;
            total += ((2.0 * mu_x * mu_y + p.c1) * (2.0 * cov + p.c2))
                / ((mu_x * mu_x + mu_y * mu_y + p.c1) * (var_x + var_y + p.c2));
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_textbook_oracle() {
        let mut r = rng(31);
        let p = SsimParams::default();
        for _ in 0..100 {
            let a = random_map(&[32, 7, 7], 0.0, 1.0, &mut r);
            let b = random_map(&[32, 7, 7], 0.0, 1.0, &mut r);
            let got = ssim(&a, &b, p).unwrap();
            let want = ssim_oracle(&a.data, &b.data, p);
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn ssim_is_exactly_symmetric() {
        let mut r = rng(32);
        let p = SsimParams::default();
        for _ in 0..20 {
            let a = random_map(&[3, 6, 6], 0.0, 1.0, &mut r);
            let b = random_map(&[3, 6, 6], 0.0, 1.0, &mut r);
            let ab = ssim(&a, &b, p).unwrap();
            let ba = ssim(&b, &a, p).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn ssim_ignores_positive_scale() {
        let mut r = rng(33);
        let p = SsimParams::default();
        for &c in &[0.3, 2.0, 117.5] {
            let a = random_map(&[4, 6, 6], 0.0, 1.0, &mut r);
            let scaled = AttentionMap::raw(
                Tensor::from_vec(
                    a.data.shape(),
                    a.data.data().iter().map(|v| v * c).collect(),
                )
                .unwrap(),
            );
            assert!((ssim(&a, &scaled, p).unwrap() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = AttentionMap::raw(Tensor::zeros(&[2, 3, 3]));
        let b = AttentionMap::raw(Tensor::zeros(&[2, 4, 4]));
        assert!(matches!(
            ssim(&a, &b, SsimParams::default()),
            Err(HallucinatorError::Tape(TapeError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn step_preserves_shape_and_bounds_state() {
        let mut r = rng(34);
        let params = HallucinatorParams::new(32, 8, &mut r);
        let a = random_map(&[32, 7, 7], 0.0, 1.0, &mut r);
        let state = ConvLstmState::zeros(8, 7, 7);
        let (pred, next) = hallucinate_step(&a, &state, &params).unwrap();
        assert_eq!(pred.data.shape(), &[32, 7, 7]);
        assert_eq!(next.h.shape(), &[8, 7, 7]);
        assert!(next.h.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_params_emit_decoder_bias_map() {
        let mut params = HallucinatorParams::zeros(3, 4);
        params.dec_b = Tensor::from_vec(&[3], vec![0.3, -0.2, 1.1]).unwrap();
        let a = AttentionMap::raw(Tensor::filled(&[3, 5, 5], 0.8));
        let state = ConvLstmState::zeros(4, 5, 5);
        let (pred, next) = hallucinate_step(&a, &state, &params).unwrap();
        for (ch, want) in [0.3, -0.2, 1.1].iter().enumerate() {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(pred.data.at3(ch, i, j), *want);
                }
            }
        }
        assert!(next.h.data().iter().all(|&v| v == 0.0));
    }

    /// Conv-LSTM step recomputed with plain loops and scalar gate math.
    fn step_oracle(
        x: &Tensor,
        state: &ConvLstmState,
        p: &HallucinatorParams,
    ) -> (Tensor, Tensor, Tensor) {
        let (h_dim, w_dim) = (x.shape()[1], x.shape()[2]);
        let conv = |inp: &Tensor, w: &Tensor, b: Option<&Tensor>| -> Tensor {
            let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
            let mut out = Tensor::zeros(&[c_out, h_dim, w_dim]);
            for co in 0..c_out {
                for i in 0..h_dim as isize {
                    for j in 0..w_dim as isize {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..c_in {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (si, sj) = (i + ky, j + kx);
                                    if si < 0
                                        || sj < 0
                                        || si >= h_dim as isize
                                        || sj >= w_dim as isize
                                    {
                                        continue;
                                    }
                                    let wv = w.data()[((co * c_in + ci) * 3
                                        + (ky + 1) as usize)
                                        * 3
                                        + (kx + 1) as usize];
                                    acc += wv * inp.at3(ci, si as usize, sj as usize);
                                }
                            }
                        }
                        out.set3(co, i as usize, j as usize, acc);
                    }
                }
            }
            out
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let e = conv(x, &p.enc_w, Some(&p.enc_b));
        let gate = |wx: &Tensor, wh: &Tensor, b: &Tensor| -> Tensor {
            let gx = conv(&e, wx, Some(b));
            let gh = conv(&state.h, wh, None);
            Tensor::from_vec(
                gx.shape(),
                gx.data().iter().zip(gh.data()).map(|(a, b)| a + b).collect(),
            )
            .unwrap()
        };
        let i = gate(&p.w_xi, &p.w_hi, &p.b_i);
        let f = gate(&p.w_xf, &p.w_hf, &p.b_f);
        let o = gate(&p.w_xo, &p.w_ho, &p.b_o);
        let g = gate(&p.w_xg, &p.w_hg, &p.b_g);
        let n = i.numel();
        let mut c_new = Tensor::zeros(state.c.shape());
        let mut h_new = Tensor::zeros(state.h.shape());
        for idx in 0..n {
            let cv = sig(f.data()[idx]) * state.c.data()[idx]
                + sig(i.data()[idx]) * g.data()[idx].tanh();
            c_new.data_mut()[idx] = cv;
            h_new.data_mut()[idx] = sig(o.data()[idx]) * cv.tanh();
        }
        let pred = conv(&h_new, &p.dec_w, Some(&p.dec_b));
        (pred, h_new, c_new)
    }

    #[test]
    fn step_matches_scalar_recurrence_oracle() {
        let mut r = rng(35);
        let params = HallucinatorParams::new(3, 4, &mut r);
        let a = random_map(&[3, 5, 5], 0.0, 1.0, &mut r);
        let mut state = ConvLstmState {
            h: Tensor::rand_uniform(&[4, 5, 5], -0.5, 0.5, &mut r),
            c: Tensor::rand_uniform(&[4, 5, 5], -0.5, 0.5, &mut r),
        };
        for _ in 0..3 {
            let (pred, next) = hallucinate_step(&a, &state, &params).unwrap();
            let (want_pred, want_h, want_c) = step_oracle(&a.data, &state, &params);
            for (g, w) in pred.data.data().iter().zip(want_pred.data()) {
                assert!((g - w).abs() <= 1e-10);
            }
            for (g, w) in next.h.data().iter().zip(want_h.data()) {
                assert!((g - w).abs() <= 1e-10);
            }
            for (g, w) in next.c.data().iter().zip(want_c.data()) {
                assert!((g - w).abs() <= 1e-10);
            }
            state = next;
        }
    }

    #[test]
    fn step_rejects_wrong_channel_count() {
        let params = HallucinatorParams::zeros(3, 4);
        let a = AttentionMap::raw(Tensor::zeros(&[2, 5, 5]));
        let state = ConvLstmState::zeros(4, 5, 5);
        assert!(matches!(
            hallucinate_step(&a, &state, &params),
            Err(HallucinatorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn belief_loss_of_identity_predictor_on_constant_sequence() {
        let p = SsimParams::default();
        let seq: Vec<AttentionMap> = (0..4)
            .map(|_| AttentionMap::raw(Tensor::filled(&[2, 4, 4], 0.6)))
            .collect();
        let terms = belief_terms_with(&seq, p, |a| Ok(a.clone())).unwrap();
        assert_eq!(terms.len(), 3);
        let loss = belief_from_terms(&terms);
        assert!((loss - -1.0).abs() <= 1e-12);
    }

    #[test]
    fn two_frame_belief_loss_is_one_negated_ssim() {
        let p = SsimParams::default();
        let constant = AttentionMap::raw(Tensor::filled(&[1, 3, 3], 1.0));
        let mut spike = Tensor::zeros(&[1, 3, 3]);
        spike.set3(0, 1, 1, 1.0);
        let spike = AttentionMap::raw(spike);
        let seq = [constant.clone(), spike.clone()];
        // Identity predictor: the single term is ssim(constant, spike).
        let terms = belief_terms_with(&seq, p, |a| Ok(a.clone())).unwrap();
        let loss = belief_from_terms(&terms);
        let direct = ssim(&constant, &spike, p).unwrap();
        assert_eq!(loss, -direct);
    }

    #[test]
    fn belief_loss_matches_term_by_term_oracle() {
        let mut r = rng(36);
        let params = HallucinatorParams::new(2, 3, &mut r);
        let p = SsimParams::default();
        let seq: Vec<AttentionMap> = (0..5)
            .map(|_| random_map(&[2, 5, 5], 0.0, 1.0, &mut r))
            .collect();
        let loss = belief_loss(&seq, &params, p).unwrap();
        // Independent accumulation: advance state by hand per transition.
        let mut state = ConvLstmState::zeros(3, 5, 5);
        let mut acc = 0.0;
        for t in 0..4 {
            let (pred, next) = hallucinate_step(&seq[t], &state, &params).unwrap();
            state = next;
            acc += ssim(&pred, &seq[t + 1], p).unwrap();
        }
        assert!((loss - (-acc / 4.0)).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&loss));
        assert!(matches!(
            belief_loss(&seq[..1], &params, p),
            Err(HallucinatorError::TooShort(1))
        ));
    }

    #[test]
    fn tape_belief_loss_agrees_with_data_path() {
        let mut r = rng(37);
        let params = HallucinatorParams::new(2, 3, &mut r);
        let p = SsimParams::default();
        let seq: Vec<AttentionMap> = (0..4)
            .map(|_| random_map(&[2, 4, 4], 0.0, 1.0, &mut r))
            .collect();
        let want = belief_loss(&seq, &params, p).unwrap();
        let tensors: Vec<Tensor> = seq.iter().map(|a| a.data.clone()).collect();
        let mut tape = Tape::new();
        let vars = params.leaf_on(&mut tape, true);
        let loss = belief_loss_on(&mut tape, &tensors, &vars, p).unwrap();
        let got = tape.value(loss).item();
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn step_gradients_pass_finite_difference_check() {
        let mut r = rng(38);
        let params = HallucinatorParams::new(2, 3, &mut r);
        let x = Tensor::rand_uniform(&[2, 4, 4], 0.0, 1.0, &mut r);
        let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        tensors.push(x);
        crate::gradcheck::check_gradients(&tensors, |tape, vars| {
            let v = HallucinatorVars {
                enc_w: vars[0],
                enc_b: vars[1],
                w_xi: vars[2],
                w_hi: vars[3],
                b_i: vars[4],
                w_xf: vars[5],
                w_hf: vars[6],
                b_f: vars[7],
                w_xo: vars[8],
                w_ho: vars[9],
                b_o: vars[10],
                w_xg: vars[11],
                w_hg: vars[12],
                b_g: vars[13],
                dec_w: vars[14],
                dec_b: vars[15],
            };
            let h = tape.constant(Tensor::zeros(&[3, 4, 4]));
            let c = tape.constant(Tensor::zeros(&[3, 4, 4]));
            let (pred, h_new, _) = hallucinate_step_on(tape, vars[16], h, c, &v)?;
            let squash = tape.tanh(pred);
            let a = tape.sum_all(squash);
            let b = tape.sum_all(h_new);
            tape.add(a, b)
        })
        .unwrap();
    }

    #[test]
    fn training_tightens_constant_sequences() {
        let p = SsimParams::default();
        let seqs: Vec<Vec<AttentionMap>> = (0..4)
            .map(|i| {
                (0..3)
                    .map(|_| AttentionMap::raw(Tensor::filled(&[2, 4, 4], 0.3 + 0.1 * i as f64)))
                    .collect()
            })
            .collect();
        let mut r = rng(39);
        let mut params = HallucinatorParams::new(2, 3, &mut r);
        let curve = train_hallucinator(&seqs, &mut params, 50, 0.05, 0.9, p).unwrap();
        assert_eq!(curve.len(), 51);
        let last = *curve.last().unwrap();
        assert!(last <= curve[0], "loss rose: {} -> {last}", curve[0]);
        assert!(last < -0.9, "constant sequences should be easy, got {last}");
    }

    #[test]
    fn zero_epoch_training_changes_nothing() {
        let p = SsimParams::default();
        let seqs = translating_blob_sequences(2, 3, 2, 5, 5, 40);
        let mut r = rng(41);
        let mut params = HallucinatorParams::new(2, 3, &mut r);
        let before = params.clone();
        let curve = train_hallucinator(&seqs, &mut params, 0, 0.05, 0.9, p).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(params, before);
        let direct: f64 = seqs
            .iter()
            .map(|s| belief_loss(s, &params, p).unwrap())
            .sum::<f64>()
            / seqs.len() as f64;
        assert_eq!(curve[0], direct);
        assert!(matches!(
            train_hallucinator(&[], &mut params, 1, 0.05, 0.9, p),
            Err(HallucinatorError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut r = rng(42);
        let params = HallucinatorParams::new(3, 4, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.halc");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);

        // Corrupt the magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic(_))
        ));
        bytes[0] = b'H';
        bytes[4] = 9; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadVersion(9))
        ));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn blob_sequences_are_deterministic_and_translate() {
        let a = translating_blob_sequences(3, 5, 2, 6, 6, 7);
        let b = translating_blob_sequences(3, 5, 2, 6, 6, 7);
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.len(), 5);
            for (ma, mb) in sa.iter().zip(sb) {
                assert_eq!(ma.data, mb.data);
                assert!(ma.data.data().iter().all(|&v| v >= 0.0));
            }
        }
        // Consecutive frames are shifted copies: SSIM to the next frame is
        // below 1 but the peak moves by exactly one cell.
        let seq = &a[0];
        let peak = |t: &Tensor| {
            let mut best = (0, 0, f64::MIN);
            for i in 0..6 {
                for j in 0..6 {
                    let v = t.at3(0, i, j);
                    if v > best.2 {
                        best = (i, j, v);
                    }
                }
            }
            (best.0 as isize, best.1 as isize)
        };
        let (r0, c0) = peak(&seq[0].data);
        let (r1, c1) = peak(&seq[1].data);
        let wrapped = |d: isize, len: isize| d.rem_euclid(len).min((-d).rem_euclid(len));
        assert_eq!(wrapped(r1 - r0, 6) + wrapped(c1 - c0, 6), 1);
    }
}
