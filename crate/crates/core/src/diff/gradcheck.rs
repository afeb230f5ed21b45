use crate::diff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Flat row-major index of the worst coordinate.
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` records a scalar function of its second argument on the given tape.
/// Errors are `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.get_or_zero(xv);
    drop(tape);
    grad_check_against(|t| eval(&f, t), x, &analytic, step)
}

/// Same as [`grad_check`] but with the analytic gradient supplied.
pub fn grad_check_against<F>(f: F, x: &Tensor, analytic: &Tensor, step: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.clone();
    let mut first = true;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                row: i / x.cols().max(1),
                col: i % x.cols().max(1),
            });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if first || err > report.max_rel_error {
            first = false;
            report = GradReport {
                max_rel_error: err,
                worst_coordinate: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Tape(format!("function must return 1x1, got {:?}", v.shape())));
    }
    Ok(v.item())
}
