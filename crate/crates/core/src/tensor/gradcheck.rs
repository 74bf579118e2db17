//! Central finite-difference verification of analytic gradients.

use super::{no_grad, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    pub tol: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub abs_floor: f64,
    /// When set, only this many evenly spaced elements per input are probed.
    pub max_elements_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-4,
            max_elements_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per probed element, one vector per input.
    pub rel_errors: Vec<Vec<(usize, f64)>>,
    pub max_rel_err: f64,
    /// `(input, element)` of the worst error.
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

/// Compares the gradient `backward` produces for `f(inputs)` against central
/// differences. `inputs` must be trainable leaves; their gradients are reset.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::Contract(format!("finite-difference step {} outside [1e-6, 1e-4]", opts.h)));
    }
    for t in inputs {
        if !t.requires_grad() || t.has_graph() {
            return Err(Error::Contract("grad_check inputs must be trainable leaves".into()));
        }
        t.zero_grad();
    }
    let loss = f(inputs)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("grad_check function must be scalar-valued".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<T>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();

    let h = T::lit(opts.h);
    let mut report = GradCheckReport {
        rel_errors: Vec::with_capacity(inputs.len()),
        max_rel_err: 0.0,
        worst: (0, 0),
        tol: opts.tol,
        passed: true,
    };
    for (which, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let probe: Vec<usize> = match opts.max_elements_per_input {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut errs = Vec::with_capacity(probe.len());
        for idx in probe {
            let orig = t.data()[idx];
            t.data_mut()[idx] = orig + h;
            let plus = no_grad(|| f(inputs))?.item();
            t.data_mut()[idx] = orig - h;
            let minus = no_grad(|| f(inputs))?.item();
            t.data_mut()[idx] = orig;
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * opts.h);
            let a = analytic[which][idx].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (which, idx);
            }
            errs.push((idx, rel));
        }
        report.rel_errors.push(errs);
    }
    for t in inputs {
        t.zero_grad();
    }
    report.passed = report.max_rel_err <= opts.tol;
    Ok(report)
}
