//! Central finite-difference checking of tape gradients.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Outcome of a gradient check over all input elements.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)`
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Compares the tape gradient of `build` with central differences of step `h`.
///
/// `build` receives a fresh tape plus one leaf per input and must return a
/// scalar node. It is called `2 * numel + 1` times.
pub fn check<S, F>(inputs: &[Tensor<S>], h: f64, mut build: F) -> Result<GradCheck>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut analytic = Vec::new();
    {
        let mut tape = Tape::new();
        let params: Vec<Tensor<S>> = inputs
            .iter()
            .map(|t| {
                let mut p = t.clone();
                p.set_requires_grad(true);
                p
            })
            .collect();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        tape.backward(out)?;
        for (v, t) in vars.iter().zip(inputs) {
            match tape.grad(*v) {
                Some(g) => analytic.extend(g.iter().map(|x| x.to_f64_lossy())),
                None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
    }

    let mut eval = |ins: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.item(out).to_f64_lossy())
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = S::c(orig.to_f64_lossy() + h);
            let plus = eval(&work)?;
            work[i].values_mut()[j] = S::c(orig.to_f64_lossy() - h);
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    let max_abs = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Ok(GradCheck {
        rel_error: max_abs / scale,
        max_abs_error: max_abs,
        checked: analytic.len(),
    })
}
