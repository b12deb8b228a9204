//! Finite-difference verification of reverse-mode gradients.
//!
//! [`check_gradients`] rebuilds the supplied graph with one input coordinate
//! nudged by ±ε and compares the central difference against the tape gradient.
//! Up to [`MAX_COORDS`] coordinates are probed, drawn deterministically across
//! all parameters.  The registry in [`run_registry`] wires every trainable
//! construct in the crate through the same harness so a single command can
//! vouch for the whole gradient surface.

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// Relative error bound; the denominator is `max(|analytic|, |numeric|, 1)`.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Coordinate budget per check.
pub const MAX_COORDS: usize = 100;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite value encountered during finite differencing")]
    NonFinite,
    #[error(
        "gradient mismatch at param {param} coord {coord}: analytic {analytic:.6e}, \
         numeric {numeric:.6e}, rel err {rel:.3e} > {tol:.1e}"
    )]
    Mismatch {
        param: usize,
        coord: usize,
        analytic: f64,
        numeric: f64,
        rel: f64,
        tol: f64,
    },
}

/// Compare tape gradients of `build` against central finite differences.
/// Returns the largest relative error seen.
pub fn check_gradients<F>(params: &[Tensor], build: F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(GradCheckError::NonFinite);
        }
        Ok(v)
    };

    // Analytic gradients from one tape pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    drop(tape);

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    if coords.len() > MAX_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xFD);
        coords.shuffle(&mut rng);
        coords.truncate(MAX_COORDS);
    }

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, ci) in coords {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + FD_EPSILON;
        let up = eval(&work)?;
        work[pi].data_mut()[ci] = orig - FD_EPSILON;
        let down = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (up - down) / (2.0 * FD_EPSILON);
        let analytic = grads[pi].data()[ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        if rel > FD_TOLERANCE {
            return Err(GradCheckError::Mismatch {
                param: pi,
                coord: ci,
                analytic,
                numeric,
                rel,
                tol: FD_TOLERANCE,
            });
        }
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Outcome of one registry entry.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Run every registered gradient check.  `corrupt` names an entry whose
/// analytic gradient is deliberately biased, as a negative control proving the
/// harness can fail.
pub fn run_registry(corrupt: Option<&str>) -> Vec<CheckReport> {
    registry_cases()
        .into_iter()
        .map(|(name, case)| {
            let corrupted = corrupt == Some(name);
            let outcome = if corrupted {
                case_with_bias(&case)
            } else {
                (case.run)()
            };
            match outcome {
                Ok(max_rel_err) => CheckReport {
                    op: name.to_string(),
                    max_rel_err,
                    threshold: FD_TOLERANCE,
                    pass: max_rel_err <= FD_TOLERANCE,
                },
                Err(e) => {
                    log::debug!("gradcheck {name}: {e}");
                    let max_rel_err = match e {
                        GradCheckError::Mismatch { rel, .. } => rel,
                        _ => f64::INFINITY,
                    };
                    CheckReport {
                        op: name.to_string(),
                        max_rel_err,
                        threshold: FD_TOLERANCE,
                        pass: false,
                    }
                }
            }
        })
        .collect()
}

pub(crate) struct RegistryCase {
    pub(crate) run: Box<dyn Fn() -> Result<f64, GradCheckError>>,
    /// Same loss with a constant bias injected into one parameter's gradient
    /// path; used only by the negative control.
    pub(crate) run_biased: Box<dyn Fn() -> Result<f64, GradCheckError>>,
}

fn case_with_bias(case: &RegistryCase) -> Result<f64, GradCheckError> {
    (case.run_biased)()
}

fn registry_cases() -> Vec<(&'static str, RegistryCase)> {
    use crate::gradcases;
    gradcases::all()
}
