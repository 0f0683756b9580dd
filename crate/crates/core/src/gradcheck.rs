//! Central finite-difference gradient checking on `f64` tensors.
//!
//! The checker only evaluates the forward function, so it serves as an
//! oracle that is independent of every backward implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Perturbation step.
    pub step: f64,
    /// Maximum allowed `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Elements with `|analytic| + |numeric|` below this are exempt.
    pub exempt_below: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-4,
            exempt_below: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheck {
    /// Compares backprop gradients of `f(inputs)` against central
    /// differences for every element of every input that requires a grad.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        for t in inputs {
            t.zero_grad();
        }
        f(inputs)?.backward()?;
        let analytic: Vec<Option<Vec<f64>>> = inputs
            .iter()
            .map(|t| t.requires_grad().then(|| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> { no_grad(|| f(inputs)).map(|t| t.item()) };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            passed: true,
        };
        for (ti, (t, grad)) in inputs.iter().zip(&analytic).enumerate() {
            let Some(grad) = grad else { continue };
            for (ei, &a) in grad.iter().enumerate() {
                let orig = t.data()[ei];
                t.data_mut()[ei] = orig + self.step;
                let plus = eval(inputs)?;
                t.data_mut()[ei] = orig - self.step;
                let minus = eval(inputs)?;
                t.data_mut()[ei] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);

                report.checked += 1;
                if a.abs() + numeric.abs() < self.exempt_below {
                    continue;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = rel;
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
        report.passed = report.max_rel_error <= self.rel_tol;
        for t in inputs {
            t.zero_grad();
        }
        Ok(report)
    }
}

/// Random `f64` leaf tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, requires_grad: bool, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    let t = Tensor::new(shape, data).expect("shape matches data");
    t.set_requires_grad(requires_grad);
    t
}

/// Reduces any tensor to a scalar through fixed random weights, so that
/// every output element contributes a distinct gradient.
pub fn random_projection(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd_ef01);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(t.mul_const(&w)?.sum())
}
