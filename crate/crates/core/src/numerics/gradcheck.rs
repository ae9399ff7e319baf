//! Central finite-difference checking of tape gradients.

use super::backend::Backend;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    Measured(f64),
    /// Every sampled point sat on a kink or outside the op's domain.
    Inconclusive,
}

impl GradCheck {
    pub fn passes(self, threshold: f64) -> bool {
        matches!(self, GradCheck::Measured(e) if e < threshold)
    }
}

const MAX_ATTEMPTS: usize = 10;

/// Compares reverse-mode gradients of the scalar op `f` against central
/// differences with step `eps`. `sample` draws the op's inputs; points where
/// the op fails or looks non-differentiable are redrawn up to 10 times.
pub fn grad_check<F, S>(f: F, mut sample: S, eps: f64) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: FnMut() -> Vec<Vec<f64>>,
{
    for _ in 0..MAX_ATTEMPTS {
        let inputs = sample();
        if let Some(err) = check_at(&f, &inputs, eps) {
            return GradCheck::Measured(err);
        }
    }
    GradCheck::Inconclusive
}

fn eval<F>(f: &F, inputs: &[Vec<f64>]) -> Option<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&mut tape, &vars).ok()?;
    let v = tape.value(&out);
    (v.len() == 1 && v[0].is_finite() && tape.failure().is_none()).then_some(v[0])
}

fn check_at<F>(f: &F, inputs: &[Vec<f64>], eps: f64) -> Option<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&mut tape, &vars).ok()?;
    let f0 = *tape.value(&out).first()?;
    let adj = tape.backward(out).ok()?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = adj.wrt(*var).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[k][j];
            probe[k][j] = x + eps;
            let fp = eval(f, &probe)?;
            probe[k][j] = x - eps;
            let fm = eval(f, &probe)?;
            probe[k][j] = x;
            let numeric = (fp - fm) / (2.0 * eps);
            // One-sided slopes that disagree mark a kink.
            let kink = ((fp - f0) - (f0 - fm)).abs() / eps;
            if kink > 1e-2 * numeric.abs().max(1.0) {
                return None;
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Some(worst)
}

/// Reduces a vector-valued output to a scalar by a fixed projection.
pub fn project<B: Backend>(b: &mut B, v: &B::V, weights: &[f64]) -> B::V {
    let w = b.constant(weights.to_vec());
    b.dot(v, &w)
}
