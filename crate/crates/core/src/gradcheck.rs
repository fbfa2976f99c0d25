//! Central finite-difference gradient checking.
//!
//! The analytic gradient from [`Tensor::backward`] is compared against
//! `(f(x + h) - f(x - h)) / 2h` for each checked element, always in double
//! precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{with_precision, Precision, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on checked elements per input; larger inputs are sampled.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_elements: 48,
            seed: 0,
        }
    }
}

/// Result of checking one function.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// Relative error with a floor tied to the gradient scale of the tensor, so
/// entries that are numerically zero compare against the tensor's magnitude.
fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Checks `loss` (a closure producing a scalar from the current values of
/// `inputs`) against finite differences on every input.
///
/// `skip(input_index, element_index)` excludes elements from the comparison,
/// e.g. bins whose amplitude is below the guard.
pub fn check_with(
    name: &str,
    inputs: &[Tensor],
    loss: impl Fn() -> Result<Tensor>,
    skip: impl Fn(usize, usize) -> bool,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    with_precision(Precision::Double, || {
        for t in inputs {
            t.zero_grad();
        }
        loss()?.backward()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut report = GradReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n = t.numel();
            let picks: Vec<usize> = if n <= opts.max_elements {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, opts.max_elements).into_vec();
                v.sort_unstable();
                v
            };
            let original = t.to_vec();
            let mut probe = original.clone();
            for &i in &picks {
                if skip(ti, i) {
                    report.skipped += 1;
                    continue;
                }
                probe[i] = original[i] + opts.step;
                t.assign(&probe)?;
                let plus = loss()?.item();
                probe[i] = original[i] - opts.step;
                t.assign(&probe)?;
                let minus = loss()?.item();
                probe[i] = original[i];
                t.assign(&probe)?;
                let numeric = (plus - minus) / (2.0 * opts.step);
                let err = relative_error(analytic[i], numeric, scale);
                report.max_rel_error = report.max_rel_error.max(err);
                report.checked += 1;
            }
            t.zero_grad();
        }
        Ok(report)
    })
}

pub fn check(name: &str, inputs: &[Tensor], loss: impl Fn() -> Result<Tensor>) -> Result<GradReport> {
    check_with(name, inputs, loss, |_, _| false, &GradCheckOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x*x) checked against an op whose backward is correct passes
        let x = Tensor::parameter(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let ok = check("square", &[x.clone()], || Ok(x.mul(&x)?.sum())).unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        // a detached factor hides half of the gradient
        let bad = check("half", &[x.clone()], || Ok(x.mul(&x.detach())?.sum())).unwrap();
        assert!(bad.max_rel_error > 0.4, "{bad:?}");
    }
}
