//! Three-exponential (modal) form of the excitation response.
//!
//! `y_exp(s) = A_1 e^{λ_1 s} + A_2 e^{λ_2 s} + A_3 e^{λ_3 s}` with
//! `λ_1 = -1/τ_i` and `λ_{2,3}` the roots of `τ²λ² + 2Dτλ + 1 = 0`.
//! Amplitudes come from the partial-fraction expansion of
//! `K / (τ² (p - λ_1)(p - λ_2)(p - λ_3))`.
//!
//! Slot convention: for `D > 1` the faster (more negative) root is `λ_2`;
//! for `D < 1` `λ_2` carries the positive imaginary part and `λ_3 = conj(λ_2)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{ModelError, PerfusionParams, CRITICAL_DAMPING_EPS, RESONANCE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalDecomposition {
    pub amplitudes: [Complex64; 3],
    pub rates: [Complex64; 3],
}

impl ModalDecomposition {
    /// `Σ A_j e^{λ_j s}` (real part; the imaginary part cancels).
    pub fn reconstruct(&self, s: f64) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.rates)
            .map(|(a, l)| (a * (l * s).exp()).re)
            .sum()
    }

    pub fn is_oscillatory(&self) -> bool {
        self.rates[1].im != 0.0
    }
}

/// Decomposes the excitation response of `params` into its three modes.
pub fn decompose(params: &PerfusionParams) -> Result<ModalDecomposition, ModelError> {
    params.validate()?;
    let tau = params.tau;
    let d = params.damping;
    let ratio = tau / params.tau_input;

    if (d - 1.0).abs() <= CRITICAL_DAMPING_EPS {
        return Err(ModelError::CriticalDamping(d));
    }
    let denom = 1.0 - 2.0 * d * ratio + ratio * ratio;
    if denom.abs() <= RESONANCE_EPS {
        return Err(ModelError::Resonance(denom));
    }

    let l1 = Complex64::new(-1.0 / params.tau_input, 0.0);
    let (l2, l3) = if d > 1.0 {
        let root = (d * d - 1.0).sqrt();
        (
            Complex64::new((-d - root) / tau, 0.0),
            Complex64::new((-d + root) / tau, 0.0),
        )
    } else {
        let w = (1.0 - d * d).sqrt() / tau;
        let l2 = Complex64::new(-d / tau, w);
        (l2, l2.conj())
    };

    let k_over_tau2 = params.gain / (tau * tau);
    let a1 = params.gain / denom;
    let a2 = k_over_tau2 / ((l2 - l1) * (l2 - l3));
    let a3 = if d > 1.0 {
        k_over_tau2 / ((l3 - l1) * (l3 - l2))
    } else {
        a2.conj()
    };

    Ok(ModalDecomposition {
        amplitudes: [Complex64::new(a1, 0.0), a2, a3],
        rates: [l1, l2, l3],
    })
}
