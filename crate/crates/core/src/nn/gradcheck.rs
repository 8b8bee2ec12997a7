//! Finite-difference gradient verification.
//!
//! The checker builds the same scalar loss twice: once through the tape's
//! analytic backward, once by central differences at 64-bit. Any op whose
//! adjoint is hand-derived is run through this before it is trusted.

use crate::error::Result;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central differences for a scalar-loss
/// graph builder `f` over `inputs`. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-6)` so near-zero gradients are judged on an
/// absolute scale.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).clone()).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + epsilon;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - epsilon;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
