//! Levenberg-Marquardt least squares with per-parameter masking.
//!
//! The cost is the plain sum of squared residuals. Jacobians are always
//! obtained by central differences so any residual function can be plugged
//! in. Fixed (masked) parameters are never written to.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("residual evaluation produced a non-finite value")]
    NonFiniteResidual,
    #[error("parameter vector has length {got}, problem expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no free parameters to optimise")]
    NoFreeParameters,
}

/// A least-squares objective: parameter vector in, residual vector out.
pub trait ResidualProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
}

/// Wraps a closure as a [`ResidualProblem`].
pub struct FnProblem<F> {
    n_params: usize,
    n_residuals: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnProblem<F> {
    pub fn new(n_params: usize, n_residuals: usize, f: F) -> Self {
        Self { n_params, n_residuals, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> ResidualProblem for FnProblem<F> {
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_residuals(&self) -> usize {
        self.n_residuals
    }
    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            fd_step: 6e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// Damping grew past its ceiling without finding a decreasing step.
    DampingExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub x: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub n_free: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

const MAX_DAMPING: f64 = 1e16;
// Damping is dropped to zero once the linearised model predicts the actual
// reduction this closely, which makes affine problems finish in two steps.
const EXACT_MODEL_RATIO: f64 = 1e-6;

fn evaluate<P: ResidualProblem + ?Sized>(problem: &P, x: &[f64]) -> Result<DVector<f64>, OptimError> {
    let r = problem.residuals(x);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteResidual);
    }
    Ok(DVector::from_vec(r))
}

fn jacobian_columns<P: ResidualProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    h: f64,
    columns: &[usize],
) -> Result<DMatrix<f64>, OptimError> {
    let m = problem.n_residuals();
    let mut jac = DMatrix::zeros(m, columns.len());
    let mut probe = x.to_vec();
    for (c, &i) in columns.iter().enumerate() {
        let step = h.max(h * x[i].abs());
        let (hi, lo) = (x[i] + step, x[i] - step);
        probe[i] = hi;
        let plus = evaluate(problem, &probe)?;
        probe[i] = lo;
        let minus = evaluate(problem, &probe)?;
        probe[i] = x[i];
        if plus.len() != m || minus.len() != m {
            return Err(OptimError::DimensionMismatch { expected: m, got: plus.len() });
        }
        let inv = 1.0 / (hi - lo);
        for row in 0..m {
            jac[(row, c)] = (plus[row] - minus[row]) * inv;
        }
    }
    Ok(jac)
}

/// Central-difference Jacobian with per-column step `max(h, h |x_i|)`.
pub fn numeric_jacobian<P: ResidualProblem + ?Sized>(problem: &P, x: &[f64], h: f64) -> Result<DMatrix<f64>, OptimError> {
    let columns: Vec<usize> = (0..x.len()).collect();
    jacobian_columns(problem, x, h, &columns)
}

pub fn cost_of<P: ResidualProblem + ?Sized>(problem: &P, x: &[f64]) -> Result<f64, OptimError> {
    Ok(evaluate(problem, x)?.norm_squared())
}

pub fn lm_minimize<P: ResidualProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    free_mask: &[bool],
    opts: &LmOptions,
) -> Result<LmResult, OptimError> {
    let n = problem.n_params();
    if x0.len() != n {
        return Err(OptimError::DimensionMismatch { expected: n, got: x0.len() });
    }
    if free_mask.len() != n {
        return Err(OptimError::DimensionMismatch { expected: n, got: free_mask.len() });
    }
    let free: Vec<usize> = (0..n).filter(|&i| free_mask[i]).collect();
    if free.is_empty() {
        return Err(OptimError::NoFreeParameters);
    }

    let mut x = x0.to_vec();
    let mut r = evaluate(problem, &x)?;
    let mut cost = r.norm_squared();
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut accepted = 0;
    let mut outer = 0;

    let termination = 'outer: loop {
        if outer >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        outer += 1;
        let jac = jacobian_columns(problem, &x, opts.fd_step, &free)?;
        let g = jac.transpose() * &r;
        if g.amax() <= opts.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        let jtj = jac.transpose() * &jac;
        let max_diag = jtj.diagonal().amax();

        loop {
            let mut a = jtj.clone();
            for i in 0..free.len() {
                let d = jtj[(i, i)].max(1e-12 * max_diag).max(f64::MIN_POSITIVE);
                a[(i, i)] += lambda * d;
            }
            let step = a.clone().cholesky().map(|c| c.solve(&(-&g))).or_else(|| a.lu().solve(&(-&g)));
            let Some(delta) = step.filter(|d| d.iter().all(|v| v.is_finite())) else {
                lambda = if lambda == 0.0 { opts.initial_damping } else { lambda * opts.damping_up };
                if lambda > MAX_DAMPING {
                    break 'outer Termination::DampingExhausted;
                }
                continue;
            };

            let mut trial = x.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += delta[k];
            }
            let trial_r = evaluate(problem, &trial).ok();
            let trial_cost = trial_r.as_ref().map(|v| v.norm_squared()).unwrap_or(f64::INFINITY);

            if trial_cost < cost {
                let predicted = {
                    let lin = &r + &jac * &delta;
                    cost - lin.norm_squared()
                };
                let actual = cost - trial_cost;
                let step_norm = delta.norm();
                let x_norm: f64 = free.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                x = trial;
                r = trial_r.expect("finite trial residuals");
                cost = trial_cost;
                accepted += 1;
                history.push(cost);
                if predicted > 0.0 && ((actual - predicted) / predicted).abs() < EXACT_MODEL_RATIO {
                    lambda = 0.0;
                } else {
                    lambda *= opts.damping_down;
                }
                if step_norm <= opts.step_tolerance * (x_norm + opts.step_tolerance) {
                    break 'outer Termination::StepTolerance;
                }
                break;
            }

            lambda = if lambda == 0.0 { opts.initial_damping } else { lambda * opts.damping_up };
            if lambda > MAX_DAMPING {
                break 'outer Termination::DampingExhausted;
            }
        }
    };

    Ok(LmResult {
        x,
        initial_cost,
        final_cost: cost,
        iterations: accepted,
        converged: matches!(termination, Termination::GradientTolerance | Termination::StepTolerance),
        termination,
        n_free: free.len(),
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_linear() {
        let p = FnProblem::new(1, 1, |x: &[f64]| vec![x[0] - 3.0]);
        let res = lm_minimize(&p, &[0.0], &[true], &LmOptions::default()).unwrap();
        assert!((res.x[0] - 3.0).abs() < 1e-12);
        assert!(res.iterations <= 2, "{}", res.iterations);
        assert!(res.converged);
    }

    #[test]
    fn rosenbrock() {
        let p = FnProblem::new(2, 2, |x: &[f64]| vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
        let res = lm_minimize(&p, &[-1.2, 1.0], &[true, true], &LmOptions::default()).unwrap();
        let err = ((res.x[0] - 1.0).powi(2) + (res.x[1] - 1.0).powi(2)).sqrt();
        assert!(err < 1e-6, "{res:?}");
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn masked_component_untouched() {
        let p = FnProblem::new(2, 2, |x: &[f64]| vec![x[0] - 3.0, x[1] - 2.0]);
        let res = lm_minimize(&p, &[5.0, 0.0], &[false, true], &LmOptions::default()).unwrap();
        assert_eq!(res.x[0], 5.0);
        assert!((res.x[1] - 2.0).abs() < 1e-12);
        assert!((res.final_cost - 4.0).abs() < 1e-12);
        assert_eq!(res.n_free, 1);
    }

    #[test]
    fn non_finite_initial_residual() {
        let p = FnProblem::new(1, 1, |x: &[f64]| vec![x[0].ln()]);
        assert_eq!(lm_minimize(&p, &[-1.0], &[true], &LmOptions::default()), Err(OptimError::NonFiniteResidual));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let p = FnProblem::new(2, 1, |x: &[f64]| vec![x[0] + x[1]]);
        assert!(matches!(lm_minimize(&p, &[0.0], &[true], &LmOptions::default()), Err(OptimError::DimensionMismatch { .. })));
        assert_eq!(lm_minimize(&p, &[0.0, 0.0], &[false, false], &LmOptions::default()), Err(OptimError::NoFreeParameters));
    }

    #[test]
    fn singular_problem_reports_termination() {
        // Residual independent of the parameter: gradient is zero at once.
        let p = FnProblem::new(1, 1, |_x: &[f64]| vec![1.0]);
        let res = lm_minimize(&p, &[0.0], &[true], &LmOptions::default()).unwrap();
        assert_eq!(res.termination, Termination::GradientTolerance);
        assert_eq!(res.final_cost, 1.0);
    }

    #[test]
    fn jacobian_of_square() {
        let p = FnProblem::new(1, 1, |x: &[f64]| vec![x[0] * x[0]]);
        let j = numeric_jacobian(&p, &[2.0], 1e-6).unwrap();
        assert!((j[(0, 0)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 4.0, 3.0, 0.25]);
        let a2 = a.clone();
        let p = FnProblem::new(2, 3, move |x: &[f64]| (&a2 * DVector::from_column_slice(x)).iter().copied().collect());
        let j = numeric_jacobian(&p, &[0.7, -1.3], 1e-6).unwrap();
        assert!((j - a).amax() < 1e-8);
    }

    #[test]
    fn jacobian_reports_non_finite_probe() {
        let p = FnProblem::new(1, 1, |x: &[f64]| vec![if x[0] > 0.0 { f64::NAN } else { x[0] }]);
        assert_eq!(numeric_jacobian(&p, &[0.0], 1e-6), Err(OptimError::NonFiniteResidual));
    }

    proptest! {
        #[test]
        fn affine_problems_finish_in_two_steps(
            entries in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            x0 in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let a = DMatrix::from_row_slice(4, 3, &entries);
            prop_assume!(a.clone().svd(false, false).singular_values.min() > 0.3);
            let bv = DVector::from_vec(b);
            let (a2, b2) = (a.clone(), bv.clone());
            let p = FnProblem::new(3, 4, move |x: &[f64]| (&a2 * DVector::from_column_slice(x) - &b2).iter().copied().collect());
            let xstar = (a.transpose() * &a).lu().solve(&(a.transpose() * &bv)).unwrap();
            let opts = LmOptions { max_iterations: 2, ..LmOptions::default() };
            let res = lm_minimize(&p, &x0, &[true, true, true], &opts).unwrap();
            let err = (DVector::from_vec(res.x) - xstar).norm();
            prop_assert!(err < 1e-8, "err {}", err);
        }

        #[test]
        fn masked_coordinates_are_bit_identical(x0 in proptest::collection::vec(-3.0f64..3.0, 3), fixed in 0usize..3) {
            let p = FnProblem::new(3, 3, |x: &[f64]| vec![x[0] * x[1] - 1.0, x[1] + x[2].sin(), x[0] - x[2] * x[2]]);
            let mut mask = vec![true; 3];
            mask[fixed] = false;
            if let Ok(res) = lm_minimize(&p, &x0, &mask, &LmOptions::default()) {
                prop_assert_eq!(res.x[fixed].to_bits(), x0[fixed].to_bits());
                prop_assert!(res.final_cost <= res.initial_cost);
                prop_assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }
}
