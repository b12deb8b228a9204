//! Pairwise self-attention over local footprints and the cumulative attention
//! map it induces.
//!
//! Each position i attends to the R x R footprint around it: per channel, the
//! compatibility of Q(x) at i with K(x) at each footprint position is pushed
//! through a softmax, and the resulting weights mix V(x).  The weights
//! themselves, one `[C, R, R]` block per position, are the local attentions;
//! scatter-adding them onto the plane yields the cumulative map that the
//! spatial and temporal samplers consume.
//!
//! The feature plane is zero padded before the Q/K/V projections are applied,
//! so out-of-plane footprint positions carry the projection of the zero
//! vector (the projection bias).  A constant plane therefore produces exactly
//! uniform weights everywhere, borders included.

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("footprint must be odd, got {0}")]
    EvenFootprint(usize),
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("no local attentions to accumulate")]
    EmptyLocals,
    #[error("local at ({row},{col}) lies outside the {h}x{w} plane")]
    CenterOutOfPlane {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },
    #[error("local weight shapes disagree: {left:?} vs {right:?}")]
    LocalShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("count mask shape {mask:?} does not match plane {plane:?}")]
    MaskShapeMismatch {
        mask: Vec<usize>,
        plane: Vec<usize>,
    },
    #[error("zero coverage count at ({row},{col})")]
    ZeroCount { row: usize, col: usize },
    #[error("attention map is already normalized")]
    AlreadyNormalized,
}

/// Where an attention map came from; normalization is only defined on the raw
/// cumulative form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    RawCumulative,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub data: Tensor,
    pub provenance: Provenance,
}

impl AttentionMap {
    pub fn raw(data: Tensor) -> Self {
        assert_eq!(data.shape().len(), 3, "attention maps are [C,H,W]");
        AttentionMap {
            data,
            provenance: Provenance::RawCumulative,
        }
    }
}

/// Softmax weights of one position over its footprint, per channel.
#[derive(Debug, Clone)]
pub struct LocalAttention {
    pub center: (usize, usize),
    /// `[C, R, R]`, rows/cols relative to `center - R/2`.
    pub weights: Tensor,
}

/// 1x1 convolution projections for queries, keys, and values.
#[derive(Debug, Clone)]
pub struct AttnProjParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
}

pub struct AttnProjVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
}

impl AttnProjParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let shape = [channels, channels, 1, 1];
        AttnProjParams {
            w_q: Tensor::rand_uniform(&shape, -bound, bound, rng),
            b_q: Tensor::zeros(&[channels]),
            w_k: Tensor::rand_uniform(&shape, -bound, bound, rng),
            b_k: Tensor::zeros(&[channels]),
            w_v: Tensor::rand_uniform(&shape, -bound, bound, rng),
            b_v: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.b_q.numel()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_q, &mut self.b_q, &mut self.w_k, &mut self.b_k, &mut self.w_v,
            &mut self.b_v,
        ]
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> AttnProjVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttnProjVars {
            w_q: put(&self.w_q),
            b_q: put(&self.b_q),
            w_k: put(&self.w_k),
            b_k: put(&self.b_k),
            w_v: put(&self.w_v),
            b_v: put(&self.b_v),
        }
    }
}

impl AttnProjVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v]
    }
}

/// Attend every position to its R x R footprint.  Returns the mixed values
/// `z: [C,H,W]` (differentiable) and the local attention blocks (data).
pub fn pairwise_attention(
    tape: &mut Tape,
    x: Var,
    proj: &AttnProjVars,
    r: usize,
) -> Result<(Var, Vec<LocalAttention>), AttentionError> {
    if r % 2 == 0 || r == 0 {
        return Err(AttentionError::EvenFootprint(r));
    }
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(AttentionError::Tape(TapeError::BadRank {
            op: "pairwise_attention",
            expected: 3,
            shape,
        }));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let p = r / 2;
    let q = tape.conv2d(x, proj.w_q, proj.b_q, 1, 0)?;
    let x_pad = tape.pad2d(x, p)?;
    let k_pad = tape.conv2d(x_pad, proj.w_k, proj.b_k, 1, 0)?;
    let v_pad = tape.conv2d(x_pad, proj.w_v, proj.b_v, 1, 0)?;
    let k_win = tape.unfold2d(k_pad, r)?;
    let v_win = tape.unfold2d(v_pad, r)?;
    let logits = tape.mul_bcast_last(q, k_win)?;
    let alpha = tape.softmax_last(logits);
    let weighted = tape.mul(alpha, v_win)?;
    let z = tape.sum_last(weighted)?;

    let av = tape.value(alpha).data();
    let rr = r * r;
    let mut locals = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut block = vec![0.0; c * rr];
            for ch in 0..c {
                let base = ((ch * h + row) * w + col) * rr;
                block[ch * rr..(ch + 1) * rr].copy_from_slice(&av[base..base + rr]);
            }
            locals.push(LocalAttention {
                center: (row, col),
                weights: Tensor::from_vec(&[c, r, r], block).expect("local block"),
            });
        }
    }
    Ok((z, locals))
}

/// Scatter-add local attention blocks onto a `[C,H,W]` plane, dropping the
/// parts of each footprint that fall outside it.
pub fn accumulate_global(
    locals: &[LocalAttention],
    h: usize,
    w: usize,
) -> Result<AttentionMap, AttentionError> {
    let first = locals.first().ok_or(AttentionError::EmptyLocals)?;
    let shape = first.weights.shape().to_vec();
    let (c, r) = (shape[0], shape[1]);
    if r % 2 == 0 {
        return Err(AttentionError::EvenFootprint(r));
    }
    let p = r as isize / 2;
    let mut out = Tensor::zeros(&[c, h, w]);
    for local in locals {
        if local.weights.shape() != shape.as_slice() {
            return Err(AttentionError::LocalShapeMismatch {
                left: shape,
                right: local.weights.shape().to_vec(),
            });
        }
        let (row, col) = local.center;
        if row >= h || col >= w {
            return Err(AttentionError::CenterOutOfPlane { row, col, h, w });
        }
        for ch in 0..c {
            for dr in 0..r {
                let gr = row as isize + dr as isize - p;
                if gr < 0 || gr >= h as isize {
                    continue;
                }
                for dc in 0..r {
                    let gc = col as isize + dc as isize - p;
                    if gc < 0 || gc >= w as isize {
                        continue;
                    }
                    let v = local.weights.at3(ch, dr, dc);
                    let cur = out.at3(ch, gr as usize, gc as usize);
                    out.set3(ch, gr as usize, gc as usize, cur + v);
                }
            }
        }
    }
    Ok(AttentionMap::raw(out))
}

/// Window anchoring for coverage counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// Odd windows centered on each grid position.
    Centered,
    /// Windows hanging right/down from each grid position, dropped when they
    /// overrun the axis.
    TopLeft,
}

/// How many windows of length `win`, placed at every `stride`-th position,
/// cover each cell of a length-`len` axis.
pub fn window_counts(len: usize, win: usize, stride: usize, anchor: Anchor) -> Vec<u32> {
    let mut counts = vec![0u32; len];
    let mut pos = 0;
    while pos < len {
        let (lo, hi) = match anchor {
            Anchor::Centered => {
                let p = win as isize / 2;
                (pos as isize - p, pos as isize + (win as isize - 1) - p)
            }
            Anchor::TopLeft => {
                if pos + win > len {
                    break;
                }
                (pos as isize, (pos + win - 1) as isize)
            }
        };
        for i in lo.max(0)..=hi.min(len as isize - 1) {
            counts[i as usize] += 1;
        }
        pos += stride;
    }
    counts
}

/// Per-cell coverage counts for centered R x R footprints on a stride grid.
/// Footprints are square and axis-aligned, so the tally separates into an
/// outer product of per-axis counts.
pub fn count_mask(h: usize, w: usize, r: usize, stride: usize) -> Result<Tensor, AttentionError> {
    if r % 2 == 0 || r == 0 {
        return Err(AttentionError::EvenFootprint(r));
    }
    if stride == 0 {
        return Err(AttentionError::ZeroStride);
    }
    let rows = window_counts(h, r, stride, Anchor::Centered);
    let cols = window_counts(w, r, stride, Anchor::Centered);
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            out.data_mut()[i * w + j] = rows[i] as f64 * cols[j] as f64;
        }
    }
    Ok(out)
}

fn check_counts(a: &AttentionMap, counts: &Tensor) -> Result<(usize, usize, usize), AttentionError> {
    if a.provenance != Provenance::RawCumulative {
        return Err(AttentionError::AlreadyNormalized);
    }
    let shape = a.data.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if counts.shape() != [h, w] {
        return Err(AttentionError::MaskShapeMismatch {
            mask: counts.shape().to_vec(),
            plane: vec![h, w],
        });
    }
    Ok((c, h, w))
}

/// Even out footprint overlap by dividing every channel by the per-cell
/// coverage count.
pub fn normalize_attention(
    a: &AttentionMap,
    counts: &Tensor,
) -> Result<AttentionMap, AttentionError> {
    let (c, h, w) = check_counts(a, counts)?;
    let mut out = Tensor::zeros(a.data.shape());
    for i in 0..h {
        for j in 0..w {
            let cnt = counts.data()[i * w + j];
            if cnt == 0.0 {
                return Err(AttentionError::ZeroCount { row: i, col: j });
            }
            for ch in 0..c {
                out.set3(ch, i, j, a.data.at3(ch, i, j) / cnt);
            }
        }
    }
    Ok(AttentionMap {
        data: out,
        provenance: Provenance::Normalized,
    })
}

/// The literal mask product `A * M`; kept for comparison with
/// [`normalize_attention`], which is the default reading.
pub fn scale_attention_by_counts(
    a: &AttentionMap,
    counts: &Tensor,
) -> Result<AttentionMap, AttentionError> {
    let (c, h, w) = check_counts(a, counts)?;
    let mut out = Tensor::zeros(a.data.shape());
    for i in 0..h {
        for j in 0..w {
            let cnt = counts.data()[i * w + j];
            for ch in 0..c {
                out.set3(ch, i, j, a.data.at3(ch, i, j) * cnt);
            }
        }
    }
    Ok(AttentionMap {
        data: out,
        provenance: Provenance::Normalized,
    })
}
