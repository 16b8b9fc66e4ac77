//! Box-constrained nonlinear least squares.
//!
//! Levenberg-Marquardt trust-region iteration in coordinates normalised by
//! bound width (every variable lives in `[0, 1]`). Variables sitting on a
//! bound with the gradient pointing outward are frozen for the step; trial
//! points are projected back into the box and accepted on the ratio of actual
//! to predicted reduction.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64], out: &mut [f64]);
    /// Jacobian of the residuals, `n_residuals x n_params`.
    fn jacobian(&self, x: &[f64], residuals: &[f64], out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Largest allowed cosine between the residual and any free Jacobian column.
    pub gtol: f64,
    /// Step length (normalised coordinates) below which iteration stops.
    pub xtol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            gtol: 1e-8,
            xtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    ExactFit,
    MaxIterations,
}

impl Termination {
    pub fn converged(self) -> bool {
        self != Termination::MaxIterations
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub x: Vec<f64>,
    /// Sum of squared residuals at `x`.
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

const MAX_TRIALS_PER_ITERATION: usize = 60;

pub fn minimize_bounded<P: LeastSquaresProblem>(
    problem: &P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &SolverOptions,
) -> SolverReport {
    let n = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(x0.len(), n);
    assert!(lower.len() == n && upper.len() == n);
    debug_assert!(lower.iter().zip(upper).all(|(l, u)| l < u));

    let width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let to_x = |z: &DVector<f64>| -> Vec<f64> {
        (0..n).map(|j| (lower[j] + z[j] * width[j]).clamp(lower[j], upper[j])).collect()
    };
    let mut z = DVector::from_iterator(n, (0..n).map(|j| ((x0[j] - lower[j]) / width[j]).clamp(0.0, 1.0)));
    let mut x = to_x(&z);

    let mut r = vec![0.0; m];
    let mut r_trial = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut cost = sum_sq(&r);
    let mut jac = DMatrix::<f64>::zeros(m, n);
    let mut scale = DVector::<f64>::zeros(n);
    let mut mu: Option<f64> = None;
    let mut nu = 2.0;

    let report = |x: Vec<f64>, cost, iterations, termination| SolverReport {
        x,
        cost,
        iterations,
        termination,
    };

    for iter in 1..=opts.max_iterations {
        if cost == 0.0 {
            return report(x, cost, iter - 1, Termination::ExactFit);
        }
        problem.jacobian(&x, &r, &mut jac);
        for (j, w) in width.iter().enumerate() {
            jac.column_mut(j).scale_mut(*w);
        }
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        let a = jac.tr_mul(&jac);

        let free: Vec<bool> = (0..n)
            .map(|j| !((z[j] <= 0.0 && g[j] > 0.0) || (z[j] >= 1.0 && g[j] < 0.0)))
            .collect();
        let r_norm = cost.sqrt();
        let max_cos = (0..n)
            .filter(|&j| free[j] && a[(j, j)] > 0.0)
            .map(|j| g[j].abs() / (a[(j, j)].sqrt() * r_norm))
            .fold(0.0, f64::max);
        if max_cos <= opts.gtol {
            return report(x, cost, iter - 1, Termination::Gradient);
        }

        let max_diag = (0..n).map(|j| a[(j, j)]).fold(0.0, f64::max);
        for j in 0..n {
            scale[j] = scale[j].max(a[(j, j)]).max(1e-12 * max_diag).max(f64::MIN_POSITIVE);
        }
        // Damping is relative to the (running-max) diagonal of JᵀJ.
        let mut damping = *mu.get_or_insert(1e-3);

        let idx: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
        let k = idx.len();
        let mut accepted = false;
        for _ in 0..MAX_TRIALS_PER_ITERATION {
            let mut sys = DMatrix::<f64>::zeros(k, k);
            let mut rhs = DVector::<f64>::zeros(k);
            for (p, &i) in idx.iter().enumerate() {
                rhs[p] = -g[i];
                for (q, &j) in idx.iter().enumerate() {
                    sys[(p, q)] = a[(i, j)];
                }
                sys[(p, p)] += damping * scale[i];
            }
            let Some(chol) = sys.cholesky() else {
                damping *= nu;
                nu *= 2.0;
                continue;
            };
            let step_free = chol.solve(&rhs);

            let mut z_trial = z.clone();
            for (p, &i) in idx.iter().enumerate() {
                z_trial[i] = (z[i] + step_free[p]).clamp(0.0, 1.0);
            }
            let step = &z_trial - &z;
            if step.norm() < opts.xtol {
                return report(x, cost, iter, Termination::Step);
            }

            let x_trial = to_x(&z_trial);
            problem.residuals(&x_trial, &mut r_trial);
            let cost_trial = sum_sq(&r_trial);
            let predicted = -(2.0 * g.dot(&step) + step.dot(&(&a * &step)));
            let actual = cost - cost_trial;
            let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };

            if rho > 1e-4 && cost_trial.is_finite() {
                z = z_trial;
                x = x_trial;
                std::mem::swap(&mut r, &mut r_trial);
                cost = cost_trial;
                damping *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                accepted = true;
                break;
            }
            damping *= nu;
            nu *= 2.0;
        }
        mu = Some(damping);
        if !accepted {
            return report(x, cost, iter, Termination::Step);
        }
    }
    report(x, cost, opts.max_iterations, Termination::MaxIterations)
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
