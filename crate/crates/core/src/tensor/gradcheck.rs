//! Central-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`]: worst relative error per input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare the analytic gradient of a scalar-valued function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, elementwise over every input.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// The function must be deterministic: it is evaluated twice at the base
/// point and must reproduce the same value bit-for-bit.
pub fn grad_check(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Invalid {
            op: "grad_check",
            msg: "h must be positive".into(),
        });
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let out = f(inputs)?;
        if out.numel() != 1 {
            return Err(Error::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        Ok(out.item())
    };

    let base = eval(inputs)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, t) in inputs.iter().enumerate() {
        let original = t.to_vec();
        let mut worst = 0.0_f64;
        for e in 0..original.len() {
            let mut plus = original.clone();
            plus[e] += h;
            t.set_data(&plus);
            let fp = eval(inputs)?;
            let mut minus = original.clone();
            minus[e] -= h;
            t.set_data(&minus);
            let fm = eval(inputs)?;
            t.set_data(&original);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[idx][e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
    })
}
