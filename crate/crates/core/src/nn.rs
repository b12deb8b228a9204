//! Recurrent cells and parameter bundles shared by the classifier heads,
//! the skip policy, and the training loops.
//!
//! Parameter structs expose their tensors in declaration order through
//! `tensors`/`tensors_mut`; checkpoints and the optimizer both rely on that
//! order, so it is part of each struct's contract.

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;

fn init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

// ── GRU ─────────────────────────────────────────────────────────────────────

/// Gated recurrent unit: update gate `z`, reset gate `r`, tanh candidate `n`,
/// new state `h' = z*h + (1-z)*n`.  A saturated update gate therefore holds
/// the previous state.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
}

pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
}

impl GruParams {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            w_z: init(&[hidden, in_dim], in_dim, rng),
            u_z: init(&[hidden, hidden], hidden, rng),
            b_z: Tensor::zeros(&[hidden]),
            w_r: init(&[hidden, in_dim], in_dim, rng),
            u_r: init(&[hidden, hidden], hidden, rng),
            b_r: Tensor::zeros(&[hidden]),
            w_n: init(&[hidden, in_dim], in_dim, rng),
            u_n: init(&[hidden, hidden], hidden, rng),
            b_n: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[hidden, in_dim]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            w_r: Tensor::zeros(&[hidden, in_dim]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            b_r: Tensor::zeros(&[hidden]),
            w_n: Tensor::zeros(&[hidden, in_dim]),
            u_n: Tensor::zeros(&[hidden, hidden]),
            b_n: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.numel()
    }

    pub fn in_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_n,
            &self.u_n, &self.b_n,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z, &mut self.u_z, &mut self.b_z, &mut self.w_r, &mut self.u_r,
            &mut self.b_r, &mut self.w_n, &mut self.u_n, &mut self.b_n,
        ]
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GruVars {
            w_z: put(&self.w_z),
            u_z: put(&self.u_z),
            b_z: put(&self.b_z),
            w_r: put(&self.w_r),
            u_r: put(&self.u_r),
            b_r: put(&self.b_r),
            w_n: put(&self.w_n),
            u_n: put(&self.u_n),
            b_n: put(&self.b_n),
        }
    }
}

impl GruVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n,
            self.b_n,
        ]
    }
}

/// One GRU step.  `x: [in_dim]`, `h: [hidden]` -> new `[hidden]` state.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, x: Var, h: Var) -> Result<Var, TapeError> {
    let gate = |tape: &mut Tape, w: Var, u: Var, hx: Var, b: Var| -> Result<Var, TapeError> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hx)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, h, p.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, p.u_r, h, p.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let n_pre = gate(tape, p.w_n, p.u_n, rh, p.b_n)?;
    let n = tape.tanh(n_pre);
    // h' = z*h + (1-z)*n
    let zh = tape.mul(z, h)?;
    let one_minus_z = {
        let neg = tape.mul_scalar(z, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let zn = tape.mul(one_minus_z, n)?;
    tape.add(zh, zn)
}

// ── stacked GRU ─────────────────────────────────────────────────────────────

/// Stack of GRU layers; layer i consumes layer i-1's new hidden state.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruParams>,
}

pub struct GruStackVars {
    pub layers: Vec<GruVars>,
}

impl GruStack {
    pub fn new(in_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 1, "GruStack needs at least one layer");
        let mut v = Vec::with_capacity(layers);
        for i in 0..layers {
            let d = if i == 0 { in_dim } else { hidden };
            v.push(GruParams::new(d, hidden, rng));
        }
        GruStack { layers: v }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn zero_state(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| Tensor::zeros(&[l.hidden()]))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> GruStackVars {
        GruStackVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.leaf_on(tape, trainable))
                .collect(),
        }
    }
}

impl GruStackVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

/// Advance the whole stack one step; returns the new per-layer states.
pub fn gru_stack_step(
    tape: &mut Tape,
    p: &GruStackVars,
    x: Var,
    state: &[Var],
) -> Result<Vec<Var>, TapeError> {
    assert_eq!(state.len(), p.layers.len(), "state/layer count mismatch");
    let mut new_state = Vec::with_capacity(state.len());
    let mut input = x;
    for (layer, &h) in p.layers.iter().zip(state) {
        let h_new = gru_cell(tape, layer, input, h)?;
        new_state.push(h_new);
        input = h_new;
    }
    Ok(new_state)
}

// ── linear head ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: init(&[out_dim, in_dim], in_dim, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn leaf_on(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        if trainable {
            LinearVars {
                w: tape.leaf(self.w.clone()),
                b: tape.leaf(self.b.clone()),
            }
        } else {
            LinearVars {
                w: tape.constant(self.w.clone()),
                b: tape.constant(self.b.clone()),
            }
        }
    }
}

impl LinearVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let y = tape.matvec(self.w, x)?;
        tape.add(y, self.b)
    }
}

/// Copy tape gradients for `vars` in order; zeros where a var was unreachable.
pub fn grads_of(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect()
}
