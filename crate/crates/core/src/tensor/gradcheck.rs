use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar program against central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element in 64-bit
/// precision, and returns the maximum relative error.
///
/// `program` receives a fresh tape and the leaf holding `x`, and must
/// return a scalar.
pub fn finite_diff_check<F>(program: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let out = program(&mut tape, leaf)?;
        tape.backward(out)?;
        tape.grad(leaf).expect("leaf requires grad").into_data()
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe, false);
        let out = program(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };
    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
