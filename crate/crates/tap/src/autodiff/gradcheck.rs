use super::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at every element of `x`.
///
/// `f` must be deterministic; this is verified by evaluating the forward
/// pass twice and requiring bit-identical results. The relative error uses
/// `|a - n| / max(|a|, |n|, 1e-6)` so exactly-zero gradients (e.g. behind a
/// min selection) compare cleanly.
pub fn grad_check<F>(f: &F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(t, false)?;
        let loss = f(&mut tape, id)?;
        if tape.numel(loss) != 1 {
            return Err(Error::invalid("grad_check", "function must be scalar-valued"));
        }
        Ok(tape.item(loss))
    };

    let v1 = eval(x)?;
    let v2 = eval(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let analytic = {
        let mut tape = Tape::new();
        let id = tape.leaf(x, true)?;
        let loss = f(&mut tape, id)?;
        tape.backward(loss)?;
        tape.grad(id)?
    };

    let mut max_rel_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        checked: x.numel(),
        tol,
    })
}

/// `grad_check` that errors instead of reporting when the check fails.
pub fn grad_check_strict<F>(f: &F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let report = grad_check(f, x, eps, tol)?;
    if !report.pass() {
        return Err(Error::GradCheckFailed {
            max_rel_err: report.max_rel_err,
            tol,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    #[test]
    fn tanh_at_zero_has_unit_gradient() {
        let x = Tensor::zeros(&[5]);
        let f = |tape: &mut Tape, xi: TensorId| {
            let y = tape.tanh(xi)?;
            tape.sum_all(y)
        };
        let report = grad_check(&f, &x, 1e-4, 1e-3).unwrap();
        assert!(report.pass());
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, true).unwrap();
        let y = tape.tanh(xi).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xi).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn non_deterministic_functions_are_rejected() {
        static CALLS: AtomicU64 = AtomicU64::new(0);
        let f = |tape: &mut Tape, xi: TensorId| {
            let n = CALLS.fetch_add(1, Ordering::SeqCst);
            let jitter = tape.scalar(n as f64 * 1e-3)?;
            let s = tape.sum_all(xi)?;
            tape.add(s, jitter)
        };
        let x = Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap();
        assert!(matches!(
            grad_check(&f, &x, 1e-4, 1e-3),
            Err(crate::Error::NonDeterministic)
        ));
    }
}
