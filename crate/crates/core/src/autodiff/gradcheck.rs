use super::tape::Tape;
use super::tensor::Tensor;
use super::Var;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest `|a - b| / max(|a|, |b|, 1e-8)` over compared elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub compared: usize,
    /// Elements where the one-sided differences disagree, i.e. the function
    /// has a kink (typically a clip boundary) within one step of `x`.
    pub kinks: Vec<usize>,
    /// Index of the worst compared element.
    pub worst: Option<usize>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(v)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    Ok(out.item())
}

/// Reverse-mode gradient of a scalar function at `x`.
pub fn gradient<F>(f: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(v)?;
    let value = out.item();
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(v)?.clone()))
}

/// Compare `backward` against central differences with the given `step`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<FdReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let f0 = eval(&f, x)?;
    let f0_again = eval(&f, x)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(Error::NonDeterministic { first: f0, second: f0_again });
    }
    let (_, analytic) = gradient(&f, x)?;

    let mut report = FdReport { max_rel_error: 0.0, max_abs_error: 0.0, compared: 0, kinks: Vec::new(), worst: None };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        let scale = fwd.abs().max(bwd.abs());
        // Rounding in f contributes about 1e-16 * |f| / step to each one-sided
        // slope, so allow a generous multiple of that before calling it a kink.
        let noise = 1e-13 * f0.abs().max(1.0) / step;
        if (fwd - bwd).abs() > 1e-2 * scale + 1e-6 + noise {
            report.kinks.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        report.compared += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(i);
        }
    }
    Ok(report)
}
