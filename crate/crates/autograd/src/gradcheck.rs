//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used, so the check is independent of every
//! backward rule it verifies.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences at 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so near-zero gradients are compared absolutely. Central
/// differences of an O(1) function at `DEFAULT_STEP` carry roundoff near 1e-10.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat element)` of the worst disagreement.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradient of `f` with central differences.
///
/// `f` rebuilds the scalar from fresh leaves each call. With `max_coords`, at
/// most that many randomly chosen elements per input are perturbed.
pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.numel() => sample(rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic.data()[j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.worst_values = (analytic.data()[j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
