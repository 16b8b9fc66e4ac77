//! Second-order perfusion response with exponential input.
//!
//! The tracer intensity of a region is modelled as
//!
//! ```text
//! y(t) = y_exp(t - θ) · H(t - θ) + y_dc
//! τ² ÿ + 2Dτ ẏ + y = K e^{-t/τ_i},   y(0) = ẏ(0) = 0
//! ```
//!
//! [`ResponseKernel`] evaluates `y_exp` in closed form with real arithmetic.
//! [`modal`] exposes the equivalent three-exponential representation and
//! [`oracle`] an independent Runge-Kutta integration used for validation.

pub mod modal;
pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use modal::{decompose, ModalDecomposition};
pub use oracle::{ode_oracle, ode_oracle_with_step};

/// Half-width of the band around `D = 1` treated as critically damped.
pub const CRITICAL_DAMPING_EPS: f64 = 1e-6;

/// Threshold on `1 - 2Dτ/τ_i + (τ/τ_i)²` below which the input rate is
/// considered resonant with a natural mode.
pub const RESONANCE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter outside model domain: {0}")]
    Domain(String),
    #[error("damping {0} is critical; the three-exponential form does not exist")]
    CriticalDamping(f64),
    #[error("input decay constant is resonant with a natural mode (denominator {0:e})")]
    Resonance(f64),
}

/// The six parameters of the perfusion response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfusionParams {
    /// Time constant τ (s).
    pub tau: f64,
    /// Damping D (dimensionless).
    pub damping: f64,
    /// Gain K (brightness).
    pub gain: f64,
    /// Input decay constant τ_i (s).
    pub tau_input: f64,
    /// Arrival delay θ (s).
    pub delay: f64,
    /// Background offset y_dc (brightness).
    pub offset: f64,
}

pub const PARAM_NAMES: [&str; 6] = ["tau", "damping", "gain", "tau_input", "delay", "offset"];

impl PerfusionParams {
    pub fn new(
        tau: f64,
        damping: f64,
        gain: f64,
        tau_input: f64,
        delay: f64,
        offset: f64,
    ) -> Result<Self, ModelError> {
        let p = Self {
            tau,
            damping,
            gain,
            tau_input,
            delay,
            offset,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks the evaluation domain: `0 < τ < τ_i`, `D > 0`, and non-negative
    /// `K`, `θ`, `y_dc`. Strict positivity of the latter three is a fitting
    /// constraint and lives in the fitter's bounds.
    pub fn validate(&self) -> Result<(), ModelError> {
        let arr = self.to_array();
        if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::Domain(format!("{} is not finite", PARAM_NAMES[i])));
        }
        if self.tau <= 0.0 {
            return Err(ModelError::Domain(format!("tau = {} must be > 0", self.tau)));
        }
        if self.tau >= self.tau_input {
            return Err(ModelError::Domain(format!(
                "tau = {} must be < tau_input = {}",
                self.tau, self.tau_input
            )));
        }
        if self.damping <= 0.0 {
            return Err(ModelError::Domain(format!(
                "damping = {} must be > 0",
                self.damping
            )));
        }
        for (name, v) in [("gain", self.gain), ("delay", self.delay), ("offset", self.offset)] {
            if v < 0.0 {
                return Err(ModelError::Domain(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Parameters in the canonical order `(τ, D, K, τ_i, θ, y_dc)`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.tau,
            self.damping,
            self.gain,
            self.tau_input,
            self.delay,
            self.offset,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            tau: a[0],
            damping: a[1],
            gain: a[2],
            tau_input: a[3],
            delay: a[4],
            offset: a[5],
        }
    }
}

/// Homogeneous part of the response, selected by the damping regime.
#[derive(Debug, Clone, Copy)]
enum Regime {
    /// `D < 1`: complex pair `-σ ± iω`.
    Under { sigma: f64, omega: f64, a1: f64 },
    /// `D >= 1`: real roots `slow = -σ + μ`, `fast = -σ - μ` (equal when critical).
    Over { slow: f64, fast: f64 },
}

/// Precomputed closed-form evaluator for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct ResponseKernel {
    params: PerfusionParams,
    lambda1: f64,
    regime: Regime,
    // Elementary symmetric functions of the three characteristic roots,
    // used for the short-time series.
    e1: f64,
    e2: f64,
    e3: f64,
    series_limit: f64,
}

impl ResponseKernel {
    pub fn new(params: &PerfusionParams) -> Result<Self, ModelError> {
        params.validate()?;
        let tau = params.tau;
        let d = params.damping;
        let lambda1 = -1.0 / params.tau_input;
        let sigma = d / tau;
        let regime = if d < 1.0 {
            let omega = (1.0 - d * d).sqrt() / tau;
            let a1 = params.gain / (tau * tau * ((lambda1 + sigma).powi(2) + omega * omega));
            Regime::Under { sigma, omega, a1 }
        } else {
            let mu = (d * d - 1.0).sqrt() / tau;
            Regime::Over {
                slow: -sigma + mu,
                fast: -sigma - mu,
            }
        };
        // Roots: λ1 and the pair with sum -2D/τ and product 1/τ².
        let pair_sum = -2.0 * sigma;
        let pair_prod = 1.0 / (tau * tau);
        let spectral_radius = lambda1
            .abs()
            .max((d + (d * d - 1.0).max(0.0).sqrt()).max(1.0) / tau);
        Ok(Self {
            params: *params,
            lambda1,
            regime,
            e1: lambda1 + pair_sum,
            e2: lambda1 * pair_sum + pair_prod,
            e3: lambda1 * pair_prod,
            series_limit: 0.05 / spectral_radius,
        })
    }

    pub fn params(&self) -> &PerfusionParams {
        &self.params
    }

    /// `y_exp(s)` and its time derivative for `s >= 0`.
    pub fn excitation(&self, s: f64) -> (f64, f64) {
        if s <= 0.0 {
            return (0.0, 0.0);
        }
        let k_over_tau2 = self.params.gain / (self.params.tau * self.params.tau);
        if s < self.series_limit {
            let (f, df) = self.short_time_series(s);
            return (k_over_tau2 * f, k_over_tau2 * df);
        }
        let l1 = self.lambda1;
        match self.regime {
            Regime::Under { sigma, omega, a1 } => {
                let decay = (-sigma * s).exp();
                let (sin, cos) = (omega * s).sin_cos();
                let sinc_s = if omega == 0.0 { s } else { sin / omega };
                let input = (l1 * s).exp();
                let y = a1 * (input - decay * (cos + (sigma + l1) * sinc_s));
                let dy = a1
                    * (l1 * input
                        - decay * (l1 * cos - (sigma * (sigma + l1) + omega * omega) * sinc_s));
                (y, dy)
            }
            Regime::Over { slow, fast } => {
                // Second divided difference of r -> e^{rs} over (λ1, slow, fast);
                // λ1 - fast >= 1/τ - 1/τ_i > 0 so the outer division is safe.
                let f_ab = divided_difference(l1, slow, s);
                let f_bc = divided_difference(slow, fast, s);
                let f = (f_ab - f_bc) / (l1 - fast);
                let df = l1 * f + f_bc;
                (k_over_tau2 * f, k_over_tau2 * df)
            }
        }
    }

    /// Full response `y(t)` including delay and offset.
    pub fn eval(&self, t: f64) -> f64 {
        self.excitation(t - self.params.delay).0 + self.params.offset
    }

    /// `y(t)` together with `dy/dt`.
    pub fn eval_with_slope(&self, t: f64) -> (f64, f64) {
        let (y, dy) = self.excitation(t - self.params.delay);
        (y + self.params.offset, dy)
    }

    /// Taylor series of the second divided difference of `e^{rs}` and of its
    /// derivative, valid while `s · max|root|` is small.
    fn short_time_series(&self, s: f64) -> (f64, f64) {
        // h_k: complete homogeneous symmetric polynomials of the roots.
        let mut h = [0.0f64; 12];
        h[0] = 1.0;
        h[1] = self.e1;
        h[2] = self.e1 * h[1] - self.e2;
        for k in 3..h.len() {
            h[k] = self.e1 * h[k - 1] - self.e2 * h[k - 2] + self.e3 * h[k - 3];
        }
        // f = Σ_{n>=2} h_{n-2} s^n / n!,  f' = Σ_{n>=2} h_{n-2} s^{n-1} / (n-1)!
        let mut f = 0.0;
        let mut df = 0.0;
        let mut pow_over_fact = s; // s^{n-1}/(n-1)! for n = 2
        for (k, hk) in h.iter().enumerate() {
            let n = (k + 2) as f64;
            df += hk * pow_over_fact;
            pow_over_fact *= s / n;
            f += hk * pow_over_fact;
        }
        (f, df)
    }
}

/// `(e^{xs} - e^{ys}) / (x - y)`, stable for close or equal nodes.
fn divided_difference(x: f64, y: f64, s: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    let z = (lo - hi) * s;
    let phi = if z == 0.0 { 1.0 } else { z.exp_m1() / z };
    (hi * s).exp() * s * phi
}

/// Evaluates the response at time `t` (seconds from injection).
pub fn response(params: &PerfusionParams, t: f64) -> Result<f64, ModelError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(ModelError::Domain(format!("time {t} must be finite and >= 0")));
    }
    Ok(ResponseKernel::new(params)?.eval(t))
}

/// Evaluates the response on a grid of times.
pub fn response_curve(params: &PerfusionParams, times: &[f64]) -> Result<Vec<f64>, ModelError> {
    let kernel = ResponseKernel::new(params)?;
    Ok(times.iter().map(|&t| kernel.eval(t)).collect())
}
