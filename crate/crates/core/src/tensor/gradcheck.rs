use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of the scalar function `f` at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the reverse-mode gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`, i.e. the
/// infinity-norm error relative to the gradient's own scale (zero when both vanish).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get(&tape, v);
    let numeric = numeric_gradient(&f, x, step)?;
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(analytic.max_abs_diff(&numeric) / scale)
}
