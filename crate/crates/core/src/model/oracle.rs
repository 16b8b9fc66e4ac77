//! Fixed-step RK4 integration of the second-order ODE.
//!
//! Shares nothing with the closed-form kernel beyond the parameter struct, so
//! it serves as an independent reference in tests and the acceptance suite.

use super::{ModelError, PerfusionParams};

/// Default number of RK4 steps per time constant `τ`.
pub const DEFAULT_STEPS_PER_TAU: f64 = 200.0;

/// Integrates the ODE on `t_grid` (must be non-decreasing) with step at most
/// `τ / 200`, applying the delay and offset.
pub fn ode_oracle(params: &PerfusionParams, t_grid: &[f64]) -> Result<Vec<f64>, ModelError> {
    ode_oracle_with_step(params, t_grid, params.tau / DEFAULT_STEPS_PER_TAU)
}

pub fn ode_oracle_with_step(
    params: &PerfusionParams,
    t_grid: &[f64],
    max_step: f64,
) -> Result<Vec<f64>, ModelError> {
    params.validate()?;
    if !(max_step > 0.0) {
        return Err(ModelError::Domain(format!("step {max_step} must be > 0")));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(ModelError::Domain("time grid must be non-decreasing".into()));
    }

    let tau2 = params.tau * params.tau;
    let two_d_tau = 2.0 * params.damping * params.tau;
    let rhs = |s: f64, y: f64, v: f64| -> (f64, f64) {
        let forcing = params.gain * (-s / params.tau_input).exp();
        (v, (forcing - two_d_tau * v - y) / tau2)
    };

    let mut out = Vec::with_capacity(t_grid.len());
    let (mut s, mut y, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for &t in t_grid {
        let target = t - params.delay;
        if target <= 0.0 {
            out.push(params.offset);
            continue;
        }
        let span = target - s;
        let n = (span / max_step).ceil().max(0.0) as usize;
        if n > 0 {
            let h = span / n as f64;
            let s0 = s;
            for i in 0..n {
                let si = s0 + i as f64 * h;
                let (k1y, k1v) = rhs(si, y, v);
                let (k2y, k2v) = rhs(si + 0.5 * h, y + 0.5 * h * k1y, v + 0.5 * h * k1v);
                let (k3y, k3v) = rhs(si + 0.5 * h, y + 0.5 * h * k2y, v + 0.5 * h * k2v);
                let (k4y, k4v) = rhs(si + h, y + h * k3y, v + h * k3v);
                y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
                v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            }
            s = target;
        }
        out.push(y + params.offset);
    }
    Ok(out)
}
