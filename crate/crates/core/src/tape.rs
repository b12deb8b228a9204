//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse creation order, which is already a topological
//! order, and accumulates gradients into every node that requires them.
//! Parameters enter through [`Tape::leaf`], fixed data through
//! [`Tape::constant`]; gradient tracking propagates to a node when any input
//! tracks gradients.
//!
//! Tapes are cheap and short-lived: training code builds a fresh tape per
//! step, reads gradients, and drops it.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: {k}x{k} kernel larger than padded {h}x{w} input")]
    KernelTooLarge { k: usize, h: usize, w: usize },
    #[error("conv2d: input has {got} channels, kernel expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: needs at least one input")]
    NoInputs { op: &'static str },
    #[error("reshape: {from:?} has {from_n} elements, {to:?} needs {to_n}")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_n: usize,
        to: Vec<usize>,
        to_n: usize,
    },
    #[error("pick: index {index} out of bounds for length {len}")]
    PickOutOfBounds { index: usize, len: usize },
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatVec(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxLast(Var),
    LogSoftmaxVec(Var),
    SumAll(Var),
    MeanAll(Var),
    MaxAll(Var, usize),
    ChannelMean(Var),
    ConcatVec(Vec<Var>),
    Pad2d(Var, usize),
    Unfold2d(Var, usize),
    MulBcastLast(Var, Var),
    SumLast(Var),
    ScaleBy(Var, Var),
    Recip(Var),
    Pick(Var, usize),
    StraightThrough(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call; `None` when the node
    /// does not require gradients or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Fixed input; gradient propagation stops here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise ─────────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TapeError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    /// Elementwise quotient; the caller keeps denominators away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = map(self.value(a), |x| x + c);
        let rg = self.rg(a);
        self.push(data, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = map(self.value(a), |x| x * c);
        let rg = self.rg(a);
        self.push(data, rg, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(data, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| {
            // Split by sign so the exponential never overflows.
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(data, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.tanh());
        let rg = self.rg(a);
        self.push(data, rg, Op::Tanh(a))
    }

    // ── linear algebra ──────────────────────────────────────────────────────

    /// `w: [m, n]`, `x: [n]` -> `[m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TapeError> {
        let ws = self.value(w).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        if ws.len() != 2 {
            return Err(TapeError::BadRank {
                op: "matvec",
                expected: 2,
                shape: ws,
            });
        }
        if xs.len() != 1 || xs[0] != ws[1] {
            return Err(TapeError::ShapeMismatch {
                op: "matvec",
                left: ws,
                right: xs,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc;
        }
        let t = Tensor::from_vec(&[m], out).expect("matvec output");
        Ok(self.push(t, self.rg(w) || self.rg(x), Op::MatVec(w, x)))
    }

    /// Strided cross-correlation: `x: [C_in, H, W]`, `w: [C_out, C_in, K, K]`,
    /// `b: [C_out]` -> `[C_out, H', W']` with `H' = (H + 2·pad − K)/stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TapeError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 {
            return Err(TapeError::BadRank {
                op: "conv2d input",
                expected: 3,
                shape: xs,
            });
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(TapeError::BadRank {
                op: "conv2d kernel",
                expected: 4,
                shape: ws,
            });
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if ws[1] != ci {
            return Err(TapeError::ChannelMismatch {
                expected: ws[1],
                got: ci,
            });
        }
        if bs != [co] {
            return Err(TapeError::ShapeMismatch {
                op: "conv2d bias",
                left: vec![co],
                right: bs,
            });
        }
        assert!(stride >= 1, "conv2d stride must be >= 1");
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TapeError::KernelTooLarge { k, h, w: wd });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bd[o];
                    for c in 0..ci {
                        for kh in 0..k {
                            let ih = oh * stride + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..k {
                                let iw = ow * stride + kw;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                let iw = iw - pad;
                                acc += xd[(c * h + ih) * wd + iw]
                                    * kd[((o * ci + c) * k + kh) * k + kw];
                            }
                        }
                    }
                    out[(o * ho + oh) * wo + ow] = acc;
                }
            }
        }
        let t = Tensor::from_vec(&[co, ho, wo], out).expect("conv2d output");
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            t,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    // ── reductions and normalizers ──────────────────────────────────────────

    /// Softmax over the last axis of any tensor of rank >= 1, computed with the
    /// usual max subtraction; shift invariance makes the subtraction exact.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let j = *shape.last().expect("softmax_last on empty shape");
        let data = self.value(a).data();
        let mut out = vec![0.0; data.len()];
        for s in 0..data.len() / j {
            let row = &data[s * j..(s + 1) * j];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (o, &x) in out[s * j..(s + 1) * j].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out[s * j..(s + 1) * j].iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor::from_vec(&shape, out).expect("softmax output");
        let rg = self.rg(a);
        self.push(t, rg, Op::SoftmaxLast(a))
    }

    /// Numerically stable `log softmax` for a vector.
    pub fn log_softmax_vec(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 1 {
            return Err(TapeError::BadRank {
                op: "log_softmax_vec",
                expected: 1,
                shape,
            });
        }
        let data = self.value(a).data();
        let m = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let logz = data.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        let out: Vec<f64> = data.iter().map(|x| x - logz).collect();
        let t = Tensor::from_vec(&shape, out).expect("log_softmax output");
        Ok(self.push(t, self.rg(a), Op::LogSoftmaxVec(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), rg, Op::MeanAll(a))
    }

    /// Maximum over all elements; the subgradient flows to the first argmax.
    pub fn max_all(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let mut best = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let m = data[best];
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), rg, Op::MaxAll(a, best))
    }

    /// Mean over all trailing axes per leading channel: `[C, ..]` -> `[C]`.
    /// Doubles as global average pooling.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(TapeError::BadRank {
                op: "channel_mean",
                expected: 2,
                shape,
            });
        }
        let c = shape[0];
        let m: usize = shape[1..].iter().product();
        let data = self.value(a).data();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = data[ch * m..(ch + 1) * m].iter().sum::<f64>() / m as f64;
        }
        let t = Tensor::from_vec(&[c], out).expect("channel_mean output");
        Ok(self.push(t, self.rg(a), Op::ChannelMean(a)))
    }

    // ── shape plumbing ──────────────────────────────────────────────────────

    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::NoInputs { op: "concat_vec" });
        }
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(TapeError::BadRank {
                    op: "concat_vec",
                    expected: 1,
                    shape: t.shape().to_vec(),
                });
            }
            out.extend_from_slice(t.data());
            rg |= self.rg(p);
        }
        let n = out.len();
        let t = Tensor::from_vec(&[n], out).expect("concat output");
        Ok(self.push(t, rg, Op::ConcatVec(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let from = self.value(a).shape().to_vec();
        let from_n = self.value(a).numel();
        let to_n: usize = shape.iter().product();
        if from_n != to_n || shape.iter().any(|&d| d == 0) {
            return Err(TapeError::ReshapeMismatch {
                from,
                from_n,
                to: shape.to_vec(),
                to_n,
            });
        }
        let t = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("checked reshape");
        Ok(self.push(t, self.rg(a), Op::Reshape(a)))
    }

    /// Zero padding of the two trailing spatial axes: `[C,H,W]` -> `[C,H+2p,W+2p]`.
    pub fn pad2d(&mut self, a: Var, p: usize) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 {
            return Err(TapeError::BadRank {
                op: "pad2d",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let data = self.value(a).data();
        let mut out = vec![0.0; c * hp * wp];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * hp + i + p) * wp + j + p] = data[(ch * h + i) * w + j];
                }
            }
        }
        let t = Tensor::from_vec(&[c, hp, wp], out).expect("pad2d output");
        Ok(self.push(t, self.rg(a), Op::Pad2d(a, p)))
    }

    /// Sliding `R x R` windows at stride 1: `[C,H,W]` -> `[C,H-R+1,W-R+1,R*R]`.
    /// Feed a padded plane to keep the window grid aligned with the original.
    pub fn unfold2d(&mut self, a: Var, r: usize) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 {
            return Err(TapeError::BadRank {
                op: "unfold2d",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if r == 0 || r > h || r > w {
            return Err(TapeError::KernelTooLarge { k: r, h, w });
        }
        let (ho, wo) = (h - r + 1, w - r + 1);
        let data = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo * r * r];
        let mut idx = 0;
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    for kh in 0..r {
                        for kw in 0..r {
                            out[idx] = data[(ch * h + i + kh) * w + j + kw];
                            idx += 1;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[c, ho, wo, r * r], out).expect("unfold output");
        Ok(self.push(t, self.rg(a), Op::Unfold2d(a, r)))
    }

    /// `a: [S...]` broadcast against `b: [S..., J]` -> `[S..., J]`.
    pub fn mul_bcast_last(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if bsh.len() != ash.len() + 1 || bsh[..ash.len()] != ash[..] {
            return Err(TapeError::ShapeMismatch {
                op: "mul_bcast_last",
                left: ash,
                right: bsh,
            });
        }
        let j = *bsh.last().expect("rank checked");
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; bd.len()];
        for i in 0..ad.len() {
            for jj in 0..j {
                out[i * j + jj] = ad[i] * bd[i * j + jj];
            }
        }
        let t = Tensor::from_vec(&bsh, out).expect("mul_bcast output");
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::MulBcastLast(a, b)))
    }

    /// Sum over the last axis: `[S..., J]` -> `[S...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(TapeError::BadRank {
                op: "sum_last",
                expected: 2,
                shape,
            });
        }
        let j = *shape.last().expect("rank checked");
        let outer = &shape[..shape.len() - 1];
        let data = self.value(a).data();
        let mut out = vec![0.0; data.len() / j];
        for (i, o) in out.iter_mut().enumerate() {
            *o = data[i * j..(i + 1) * j].iter().sum();
        }
        let t = Tensor::from_vec(outer, out).expect("sum_last output");
        Ok(self.push(t, self.rg(a), Op::SumLast(a)))
    }

    /// Scale a tensor by a shape-[1] variable (both sides differentiable).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TapeError> {
        if self.value(s).numel() != 1 {
            return Err(TapeError::BadRank {
                op: "scale_by",
                expected: 1,
                shape: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).item();
        let data = map(self.value(x), |v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(data, rg, Op::ScaleBy(x, s)))
    }

    /// Reciprocal of a shape-[1] variable; the caller keeps it away from zero.
    pub fn recip(&mut self, s: Var) -> Result<Var, TapeError> {
        if self.value(s).numel() != 1 {
            return Err(TapeError::BadRank {
                op: "recip",
                expected: 1,
                shape: self.value(s).shape().to_vec(),
            });
        }
        let v = self.value(s).item();
        let rg = self.rg(s);
        Ok(self.push(Tensor::scalar(1.0 / v), rg, Op::Recip(s)))
    }

    /// Select one element of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 1 {
            return Err(TapeError::BadRank {
                op: "pick",
                expected: 1,
                shape,
            });
        }
        let len = self.value(a).numel();
        if index >= len {
            return Err(TapeError::PickOutOfBounds { index, len });
        }
        let v = self.value(a).data()[index];
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), rg, Op::Pick(a, index)))
    }

    /// Straight-through one-hot: forward emits the hard argmax (first maximum
    /// wins), backward passes the incoming gradient through unchanged.
    pub fn straight_through(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 1 {
            return Err(TapeError::BadRank {
                op: "straight_through",
                expected: 1,
                shape,
            });
        }
        let data = self.value(a).data();
        let mut best = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; data.len()];
        out[best] = 1.0;
        let t = Tensor::from_vec(&shape, out).expect("straight_through output");
        Ok(self.push(t, self.rg(a), Op::StraightThrough(a)))
    }

    // ── backward ────────────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Seed the scalar `loss` with gradient 1 and accumulate gradients into
    /// every reachable gradient-tracking node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        if self.value(loss).numel() != 1 {
            return Err(TapeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<(), TapeError> {
        // Values are read before mutation; every input index is below i.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg = map(g, |x| -x);
                self.accumulate(b, &neg);
            }
            &Op::Mul(a, b) => {
                let da = zip_map(g, self.value(b), |gi, bi| gi * bi);
                let db = zip_map(g, self.value(a), |gi, ai| gi * ai);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Div(a, b) => {
                let da = zip_map(g, self.value(b), |gi, bi| gi / bi);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let mut db = g.clone();
                for (k, d) in db.data_mut().iter_mut().enumerate() {
                    *d = -*d * av[k] / (bv[k] * bv[k]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::AddScalar(a) => self.accumulate(a, g),
            &Op::MulScalar(a, c) => {
                let da = map(g, |x| x * c);
                self.accumulate(a, &da);
            }
            &Op::MatVec(w, x) => {
                let ws = self.value(w).shape();
                let (m, n) = (ws[0], ws[1]);
                let wd = self.value(w).data();
                let xd = self.value(x).data();
                let gd = g.data();
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                for ii in 0..m {
                    let gi = gd[ii];
                    for jj in 0..n {
                        dw[ii * n + jj] += gi * xd[jj];
                        dx[jj] += wd[ii * n + jj] * gi;
                    }
                }
                let dw = Tensor::from_vec(&[m, n], dw).expect("matvec dw");
                let dx = Tensor::from_vec(&[n], dx).expect("matvec dx");
                self.accumulate(w, &dw);
                self.accumulate(x, &dx);
            }
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.value(x).shape().to_vec();
                let ws = self.value(w).shape().to_vec();
                let (ci, h, wd_) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let os = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (os[1], os[2]);
                let xd = self.value(x).data();
                let kd = self.value(w).data();
                let gd = g.data();
                let mut dx = vec![0.0; ci * h * wd_];
                let mut dw = vec![0.0; co * ci * k * k];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = gd[(o * ho + oh) * wo + ow];
                            db[o] += gv;
                            for c in 0..ci {
                                for kh in 0..k {
                                    let ih = oh * stride + kh;
                                    if ih < pad || ih - pad >= h {
                                        continue;
                                    }
                                    let ih = ih - pad;
                                    for kw in 0..k {
                                        let iw = ow * stride + kw;
                                        if iw < pad || iw - pad >= wd_ {
                                            continue;
                                        }
                                        let iw = iw - pad;
                                        dx[(c * h + ih) * wd_ + iw] +=
                                            kd[((o * ci + c) * k + kh) * k + kw] * gv;
                                        dw[((o * ci + c) * k + kh) * k + kw] +=
                                            xd[(c * h + ih) * wd_ + iw] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let dx = Tensor::from_vec(&xs, dx).expect("conv dx");
                let dw = Tensor::from_vec(&ws, dw).expect("conv dw");
                let db = Tensor::from_vec(&[co], db).expect("conv db");
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            &Op::Relu(a) => {
                let da = zip_map(g, self.value(a), |gi, ai| if ai > 0.0 { gi } else { 0.0 });
                self.accumulate(a, &da);
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da = zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(a, &da);
            }
            &Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let da = zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(a, &da);
            }
            &Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let j = *y.shape().last().expect("softmax shape");
                let yd = y.data();
                let gd = g.data();
                let mut da = vec![0.0; yd.len()];
                for s in 0..yd.len() / j {
                    let base = s * j;
                    let mut dot = 0.0;
                    for jj in 0..j {
                        dot += gd[base + jj] * yd[base + jj];
                    }
                    for jj in 0..j {
                        da[base + jj] = yd[base + jj] * (gd[base + jj] - dot);
                    }
                }
                let da = Tensor::from_vec(y.shape(), da).expect("softmax da");
                self.accumulate(a, &da);
            }
            &Op::LogSoftmaxVec(a) => {
                let y = &self.nodes[i].value;
                let gd = g.data();
                let gsum: f64 = gd.iter().sum();
                let da: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&ly, &gi)| gi - ly.exp() * gsum)
                    .collect();
                let da = Tensor::from_vec(y.shape(), da).expect("log_softmax da");
                self.accumulate(a, &da);
            }
            &Op::SumAll(a) => {
                let gv = g.item();
                let da = Tensor::filled(self.value(a).shape(), gv);
                self.accumulate(a, &da);
            }
            &Op::MeanAll(a) => {
                let n = self.value(a).numel() as f64;
                let da = Tensor::filled(self.value(a).shape(), g.item() / n);
                self.accumulate(a, &da);
            }
            &Op::MaxAll(a, argmax) => {
                let mut da = Tensor::zeros(self.value(a).shape());
                da.data_mut()[argmax] = g.item();
                self.accumulate(a, &da);
            }
            &Op::ChannelMean(a) => {
                let shape = self.value(a).shape().to_vec();
                let c = shape[0];
                let m: usize = shape[1..].iter().product();
                let gd = g.data();
                let mut da = vec![0.0; c * m];
                for ch in 0..c {
                    let gv = gd[ch] / m as f64;
                    for e in da[ch * m..(ch + 1) * m].iter_mut() {
                        *e = gv;
                    }
                }
                let da = Tensor::from_vec(&shape, da).expect("channel_mean da");
                self.accumulate(a, &da);
            }
            Op::ConcatVec(parts) => {
                let parts = parts.clone();
                let gd = g.data().to_vec();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    let da = Tensor::from_vec(&[n], gd[offset..offset + n].to_vec())
                        .expect("concat da");
                    self.accumulate(p, &da);
                    offset += n;
                }
            }
            &Op::Pad2d(a, p) => {
                let shape = self.value(a).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (hp, wp) = (h + 2 * p, w + 2 * p);
                let gd = g.data();
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for ih in 0..h {
                        for iw in 0..w {
                            da[(ch * h + ih) * w + iw] = gd[(ch * hp + ih + p) * wp + iw + p];
                        }
                    }
                }
                let da = Tensor::from_vec(&shape, da).expect("pad2d da");
                self.accumulate(a, &da);
            }
            &Op::Unfold2d(a, r) => {
                let shape = self.value(a).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h - r + 1, w - r + 1);
                let gd = g.data();
                let mut da = vec![0.0; c * h * w];
                let mut idx = 0;
                for ch in 0..c {
                    for ih in 0..ho {
                        for iw in 0..wo {
                            for kh in 0..r {
                                for kw in 0..r {
                                    da[(ch * h + ih + kh) * w + iw + kw] += gd[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                let da = Tensor::from_vec(&shape, da).expect("unfold da");
                self.accumulate(a, &da);
            }
            &Op::MulBcastLast(a, b) => {
                let ash = self.value(a).shape().to_vec();
                let j = *self.value(b).shape().last().expect("bcast shape");
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let gd = g.data();
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for ii in 0..ad.len() {
                    let mut acc = 0.0;
                    for jj in 0..j {
                        acc += gd[ii * j + jj] * bd[ii * j + jj];
                        db[ii * j + jj] = gd[ii * j + jj] * ad[ii];
                    }
                    da[ii] = acc;
                }
                let da = Tensor::from_vec(&ash, da).expect("bcast da");
                let db = Tensor::from_vec(self.value(b).shape(), db).expect("bcast db");
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::SumLast(a) => {
                let shape = self.value(a).shape().to_vec();
                let j = *shape.last().expect("sum_last shape");
                let gd = g.data();
                let mut da = vec![0.0; self.value(a).numel()];
                for ii in 0..gd.len() {
                    for jj in 0..j {
                        da[ii * j + jj] = gd[ii];
                    }
                }
                let da = Tensor::from_vec(&shape, da).expect("sum_last da");
                self.accumulate(a, &da);
            }
            &Op::ScaleBy(x, s) => {
                let sv = self.value(s).item();
                let dx = map(g, |gi| gi * sv);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                self.accumulate(x, &dx);
                self.accumulate(s, &Tensor::scalar(ds));
            }
            &Op::Recip(s) => {
                let sv = self.value(s).item();
                let ds = -g.item() / (sv * sv);
                self.accumulate(s, &Tensor::scalar(ds));
            }
            &Op::Pick(a, index) => {
                let mut da = Tensor::zeros(self.value(a).shape());
                da.data_mut()[index] = g.item();
                self.accumulate(a, &da);
            }
            &Op::StraightThrough(a) => self.accumulate(a, g),
            &Op::Reshape(a) => {
                let da = g
                    .clone()
                    .reshaped(self.value(a).shape())
                    .expect("reshape grad");
                self.accumulate(a, &da);
            }
        }
        Ok(())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
    Tensor::from_vec(t.shape(), data).expect("map preserves shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map preserves shape")
}
