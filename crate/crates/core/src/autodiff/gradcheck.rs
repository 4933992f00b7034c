use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(f: &mut F, x: Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = f(&mut tape, v)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid("grad_check: function must be scalar-valued"));
    }
    let s = tape.scalar(out);
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(s)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h`, on every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed element indices.
pub fn grad_check_at<F>(mut f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic: Vec<f32> = match tape.grad(v) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let base = x.data()[i];
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = (base as f64 + h) as f32;
        minus.data_mut()[i] = (base as f64 - h) as f32;
        // Use the step actually representable in f32.
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let fp = eval(&mut f, plus)?;
        let fm = eval(&mut f, minus)?;
        let numeric = (fp - fm) / step;
        let a = analytic[i] as f64;
        if !a.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
