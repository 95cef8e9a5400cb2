//! Central-difference gradient oracle, independent of the recorded graph.

use super::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per element.
///
/// `f` must be deterministic; `x`'s buffer is perturbed in place and restored.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Vec<f64>
where
    F: Fn() -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let n = x.numel();
    let original = x.to_vec();
    let mut grad = vec![0.0; n];
    let mut work = original.clone();
    for i in 0..n {
        work[i] = original[i] + h;
        x.set_data(&work);
        let plus = f();
        work[i] = original[i] - h;
        x.set_data(&work);
        let minus = f();
        work[i] = original[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    x.set_data(&original);
    grad
}

/// `max_i |a_i - b_i|` normalized by the largest magnitude seen in `b`
/// (floored to avoid division by zero on all-zero gradients).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<24} max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_error,
            self.tolerance
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backprop, scale, sum};

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let xf = x.clone();
        let g = finite_difference_gradient(move || xf.data().iter().sum(), &x, 1e-5);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_half_sum_squares_is_x() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let xf = x.clone();
        let g = finite_difference_gradient(
            move || 0.5 * xf.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        );
        assert!((g[0] - 1.0).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn backprop_matches_fd_on_scaled_sum() {
        let x = Tensor::from_vec(vec![4], vec![0.5, -0.25, 2.0, -1.5])
            .unwrap()
            .requires_grad(true);
        let loss = sum(&scale(&x, 3.0));
        backprop(&loss).unwrap();
        let analytic = x.grad().unwrap();
        let xf = x.clone();
        let numeric =
            finite_difference_gradient(move || 3.0 * xf.data().iter().sum::<f64>(), &x, 1e-5);
        assert!(max_relative_error(&analytic, &numeric) < 1e-9);
    }
}
