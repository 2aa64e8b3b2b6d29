//! Finite-difference gradient checking on a 64-bit evaluation path.
//!
//! The harness re-executes the op graph in `f64` so that central differences
//! at eps = 1e-3 resolve well below the 1e-4 acceptance tolerance; 32-bit
//! differences would be dominated by rounding noise.

use crate::tensor::TensorBase;

/// Outcome of checking one operation.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub num_params_checked: usize,
}

impl GradCheckReport {
    fn empty(op_name: &str) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            num_params_checked: 0,
        }
    }

    /// Folds another report into this one, keeping the worst errors.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.num_params_checked += other.num_params_checked;
    }
}

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients against finite-difference gradients laid out
/// input-by-input. Exposed separately so tests can feed deliberately corrupted
/// analytic gradients through the same comparison.
pub fn compare_gradients(op_name: &str, analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport::empty(op_name);
    for (a_in, f_in) in analytic.iter().zip(fd) {
        for (&a, &f) in a_in.iter().zip(f_in) {
            report.max_rel_err = report.max_rel_err.max(rel_err(a, f));
            report.max_abs_err = report.max_abs_err.max((a - f).abs());
            report.num_params_checked += 1;
        }
    }
    report
}

/// Checks `build(inputs)` (which must return a scalar) against central finite
/// differences, perturbing every element of every `requires_grad` input by
/// +-eps. `build` must be a pure function of the input data.
pub fn grad_check<F>(op_name: &str, inputs: &[TensorBase<f64>], build: F, eps: f64) -> GradCheckReport
where
    F: Fn(&[TensorBase<f64>]) -> TensorBase<f64>,
{
    assert!(eps > 0.0, "grad_check eps must be positive");
    let loss = build(inputs);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar objective");
    loss.backward().expect("backward on scalar");

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut fd: Vec<Vec<f64>> = Vec::new();

    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let base = input.to_vec();
        let grad = input
            .grad()
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut fd_grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let eval = |v: f64| -> f64 {
                let mut data = base.clone();
                data[i] = v;
                let mut probe: Vec<TensorBase<f64>> = inputs.to_vec();
                probe[idx] = TensorBase::param(data, input.shape()).expect("probe tensor");
                build(&probe).item()
            };
            let plus = eval(base[i] + eps);
            let minus = eval(base[i] - eps);
            fd_grad[i] = (plus - minus) / (2.0 * eps);
        }
        analytic.push(grad);
        fd.push(fd_grad);
    }
    compare_gradients(op_name, &analytic, &fd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mean_all, scale_mul, TensorBase};

    #[test]
    fn linear_map_is_exact() {
        // f(x) = 3x: central differences are exact for linear maps.
        let x = TensorBase::<f64>::param(vec![0.3, -1.7, 2.2], &[3]).unwrap();
        let report = grad_check("affine", &[x], |ins| mean_all(&scale_mul(&ins[0], 3.0)), 1e-3);
        assert_eq!(report.num_params_checked, 3);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let analytic = vec![vec![1.0, 2.0]];
        let mut fd = analytic.clone();
        fd[0][1] *= 1.5;
        let report = compare_gradients("broken", &analytic, &fd);
        assert!(report.max_rel_err > 0.3);
        assert_eq!(report.num_params_checked, 2);
    }
}
