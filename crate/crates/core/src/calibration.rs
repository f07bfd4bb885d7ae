//! Box-constrained logit calibration.
//!
//! Given logits `Z` (batch × C) and labels, find `W` (C × C, every entry in
//! `[-1, 1]`) maximizing the mean log-likelihood of `softmax(Z Wᵀ)`. The
//! objective is concave, so projected gradient ascent from the identity
//! converges to the optimum; the whole solve is recorded on the tape so the
//! calibrated loss can be differentiated with respect to `Z`.
//!
//! The ascent direction is the analytic gradient `(Y - P)ᵀ Z / b`. Steps
//! start at `step_size`; an accepted step doubles the next one and a step
//! that would lose likelihood is discarded and retried at half the length, so
//! the iterates never get worse than the identity. Every trial counts toward
//! `max_iters`. Step lengths are discrete choices, so the recorded solve is
//! differentiable almost everywhere.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::nll;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub max_iters: usize,
    pub step_size: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { max_iters: 25, step_size: 0.5 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CalibrationResult<'t, T> {
    /// `(C, C)`, every entry in `[-1, 1]`.
    pub w: Var<'t, T>,
    pub achieved_nll: T,
    pub iterations_used: usize,
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * classes + y] = T::one();
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

fn check<T: Scalar>(logits: &Var<'_, T>, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = logits.shape();
    let [b, c] = shape[..] else {
        return Err(Error::Architecture(format!("calibration expects (batch, classes) logits, got {shape:?}")));
    };
    if c < 2 {
        return Err(Error::Architecture("calibration needs at least 2 classes".into()));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch { what: "calibration labels".into(), expected: b, got: labels.len() });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label: y, classes: c });
    }
    if !logits.with_value(Tensor::all_finite) {
        return Err(Error::NonFinite("calibration logits".into()));
    }
    Ok((b, c))
}

/// Projected gradient ascent on `W`, recorded on the logits' tape.
pub fn solve_calibration<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult<'t, T>> {
    let (b, c) = check(&logits, labels)?;
    let tape: &'t Tape<T> = logits.tape();
    let y = tape.constant(one_hot(labels, c));
    let inv_b = T::one() / T::lit(b as f64);
    let objective = |w: Var<'t, T>| -> Result<Var<'t, T>> { nll(logits.matmul(w.t()?)?, labels) };

    let mut w = tape.constant(Tensor::from_parts(
        vec![c, c],
        (0..c * c).map(|i| if i / c == i % c { T::one() } else { T::zero() }).collect(),
    ));
    let mut current = objective(w)?.item();
    let mut eta = T::lit(cfg.step_size);
    let mut iterations_used = 0;
    let mut grad = None;
    while iterations_used < cfg.max_iters {
        iterations_used += 1;
        let g = match grad {
            Some(g) => g,
            None => {
                let p = logits.matmul(w.t()?)?.log_softmax()?.exp()?;
                let g = y.sub(p)?.t()?.matmul(logits)?.scale(inv_b)?;
                grad = Some(g);
                g
            }
        };
        let trial = w.add(g.scale(eta)?)?.clamp(-T::one(), T::one())?;
        let moved = {
            let (a, bw) = (w.value(), trial.value());
            a.data().iter().zip(bw.data()).fold(T::zero(), |m, (x, z)| m.max((*x - *z).abs()))
        };
        if moved < T::lit(1e-12) {
            break;
        }
        let value = objective(trial)?.item();
        if value <= current {
            w = trial;
            current = value;
            grad = None;
            eta = eta + eta;
        } else {
            eta = eta * T::lit(0.5);
        }
    }
    Ok(CalibrationResult { w, achieved_nll: current, iterations_used })
}

/// `nll(Z Wᵀ)` with `W` from [`solve_calibration`], or plain `nll(Z)` when `cfg` is `None`.
pub fn calibrated_nll<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
    cfg: Option<&CalibrationConfig>,
) -> Result<Var<'t, T>> {
    match cfg {
        None => nll(logits, labels),
        Some(cfg) => {
            let sol = solve_calibration(logits, labels, cfg)?;
            nll(logits.matmul(sol.w.t()?)?, labels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_ln_c() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[6, 3]));
        let l = calibrated_nll(z, &[0, 1, 2, 2, 1, 0], Some(&CalibrationConfig::default())).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn disabled_path_is_plain_nll() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(&[[0.3, -0.2], [1.0, 2.0]]).unwrap());
        let a = calibrated_nll(z, &[0, 1], None).unwrap().item();
        let b = nll(z, &[0, 1]).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_logits_are_unflipped() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(&[[2.0, -2.0], [-1.5, 1.5], [3.0, -1.0], [-2.0, 2.5]]).unwrap());
        let labels = [1, 0, 1, 0];
        let raw = nll(z, &labels).unwrap().item();
        let cal = calibrated_nll(z, &labels, Some(&CalibrationConfig::default())).unwrap().item();
        assert!(raw > std::f64::consts::LN_2);
        assert!(cal < std::f64::consts::LN_2);
    }

    #[test]
    fn rejects_non_finite_logits() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap());
        assert!(matches!(solve_calibration(z, &[0], &CalibrationConfig::default()), Err(Error::NonFinite(_))));
    }
}
