//! Twelve-feature signature of a fitted region: four time-to-peak (TTP)
//! features read off the fitted curve and eight features of its
//! three-exponential modal form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitter::FitResult;
use crate::ingest::RoiSeries;
use crate::model::{decompose, ModalDecomposition, ModelError, ResponseKernel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("fit did not converge")]
    NotConverged,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const FEATURE_NAMES: [&str; 12] = [
    "t_max",
    "t_half_max",
    "t_ratio",
    "slope",
    "lambda1_neg",
    "re_lambda2_neg",
    "re_lambda3_neg",
    "im_lambda2",
    "a1",
    "re_a2",
    "re_a3",
    "im_a2",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    /// Time of the peak, counted from injection (t = 0).
    pub t_max: f64,
    /// First time the rising edge reaches half the peak height above offset.
    pub t_half_max: f64,
    pub t_ratio: f64,
    /// Chord slope of the rise, `(peak - y_dc) / (t_max - θ)`.
    pub slope: f64,
    /// Wash-out rate `-λ_1`.
    pub lambda1_neg: f64,
    pub re_lambda2_neg: f64,
    pub re_lambda3_neg: f64,
    pub im_lambda2: f64,
    pub a1: f64,
    pub re_a2: f64,
    pub re_a3: f64,
    pub im_a2: f64,
}

impl Signature {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.t_max,
            self.t_half_max,
            self.t_ratio,
            self.slope,
            self.lambda1_neg,
            self.re_lambda2_neg,
            self.re_lambda3_neg,
            self.im_lambda2,
            self.a1,
            self.re_a2,
            self.re_a3,
            self.im_a2,
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        let [t_max, t_half_max, t_ratio, slope, lambda1_neg, re_lambda2_neg, re_lambda3_neg, im_lambda2, a1, re_a2, re_a3, im_a2] =
            a;
        Self {
            t_max,
            t_half_max,
            t_ratio,
            slope,
            lambda1_neg,
            re_lambda2_neg,
            re_lambda3_neg,
            im_lambda2,
            a1,
            re_a2,
            re_a3,
            im_a2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtpFeatures {
    pub t_max: f64,
    pub t_half_max: f64,
    pub t_ratio: f64,
    pub slope: f64,
}

const BISECTION_STEPS: usize = 200;

/// Bisects `f` on `[lo, hi]` given `f(lo) < 0 <= f(hi)` (or the reverse
/// ordering of signs, as long as they differ).
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let lo_negative = f(lo) < 0.0;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// TTP features of the fitted curve on `[θ, t_end]`, scanned with step
/// `grid_step` and refined by bisection.
pub fn ttp_features(fit: &FitResult, t_end: f64, grid_step: f64) -> Result<TtpFeatures, FeatureError> {
    if !fit.converged {
        return Err(FeatureError::NotConverged);
    }
    let p = fit.params;
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(FeatureError::Grid(format!("grid step {grid_step} must be positive")));
    }
    if !(t_end > p.delay) {
        return Err(FeatureError::Grid(format!("series end {t_end} does not exceed the delay {}", p.delay)));
    }
    let kernel = ResponseKernel::new(&p)?;
    let n = ((t_end - p.delay) / grid_step).ceil() as usize;
    let time = |k: usize| (p.delay + k as f64 * grid_step).min(t_end);

    let mut best = 0;
    let mut best_y = kernel.eval(time(0));
    for k in 1..=n {
        let y = kernel.eval(time(k));
        if y > best_y {
            best = k;
            best_y = y;
        }
    }

    // Refine the peak on the analytic slope when it changes sign around the
    // grid maximizer.
    let slope_at = |t: f64| kernel.eval_with_slope(t).1;
    let mut t_max = time(best);
    if best > 0 && best < n {
        let (lo, hi) = (time(best - 1), time(best + 1));
        if slope_at(lo) > 0.0 && slope_at(hi) < 0.0 {
            t_max = bisect(lo, hi, |t| -slope_at(t));
        }
    }
    let peak = kernel.eval(t_max).max(best_y);
    let rise = peak - p.offset;
    if !(rise > 0.0) || !(t_max > p.delay) {
        return Err(FeatureError::Grid("fitted curve has no rise".into()));
    }

    let half = p.offset + 0.5 * rise;
    let above = (0..=best).find(|&k| kernel.eval(time(k)) >= half).unwrap_or(best);
    let t_half_max = if above == 0 {
        time(0)
    } else {
        bisect(time(above - 1), time(above).min(t_max), |t| kernel.eval(t) - half)
    };

    Ok(TtpFeatures {
        t_max,
        t_half_max,
        t_ratio: t_half_max / t_max,
        slope: rise / (t_max - p.delay),
    })
}

/// `(-λ_1, -Re λ_2, -Re λ_3, Im λ_2, A_1, Re A_2, Re A_3, Im A_2)`, with the
/// faster of the two wash-in modes in slot 2.
pub fn exp_features(decomp: &ModalDecomposition) -> [f64; 8] {
    let [l1, mut l2, mut l3] = decomp.rates;
    let [a1, mut a2, mut a3] = decomp.amplitudes;
    if -l3.re > -l2.re {
        std::mem::swap(&mut l2, &mut l3);
        std::mem::swap(&mut a2, &mut a3);
    }
    [-l1.re, -l2.re, -l3.re, l2.im, a1.re, a2.re, a3.re, a2.im]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityReason {
    TooShort,
    BadDamping,
    TauTooLarge,
    L1Exceeded,
}

impl QualityReason {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityReason::TooShort => "too_short",
            QualityReason::BadDamping => "bad_damping",
            QualityReason::TauTooLarge => "tau_too_large",
            QualityReason::L1Exceeded => "l1_exceeded",
        }
    }
}

impl std::fmt::Display for QualityReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityRules {
    /// Shortest acceptable record, seconds.
    pub min_duration: f64,
    pub damping_range: [f64; 2],
    /// Fits with `τ` at or above this are rejected.
    pub max_tau: f64,
    pub max_l1: f64,
}

impl Default for QualityRules {
    fn default() -> Self {
        Self {
            min_duration: 100.0,
            damping_range: [0.05, 10.0],
            max_tau: 100.0,
            max_l1: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub accepted: bool,
    pub reasons: Vec<QualityReason>,
}

impl QualityVerdict {
    pub fn from_reasons(reasons: Vec<QualityReason>) -> Self {
        Self {
            accepted: reasons.is_empty(),
            reasons,
        }
    }
}

pub fn quality_filter(series: &RoiSeries, fit: &FitResult, rules: &QualityRules) -> QualityVerdict {
    quality_for_duration(series.duration(), fit, rules)
}

/// [`quality_filter`] for a record of the given duration.
pub fn quality_for_duration(duration: f64, fit: &FitResult, rules: &QualityRules) -> QualityVerdict {
    let mut reasons = Vec::new();
    if duration < rules.min_duration {
        reasons.push(QualityReason::TooShort);
    }
    let d = fit.params.damping;
    if !(d >= rules.damping_range[0] && d <= rules.damping_range[1]) {
        reasons.push(QualityReason::BadDamping);
    }
    if fit.params.tau >= rules.max_tau {
        reasons.push(QualityReason::TauTooLarge);
    }
    if !(fit.l1_relative_error <= rules.max_l1) {
        reasons.push(QualityReason::L1Exceeded);
    }
    QualityVerdict::from_reasons(reasons)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SignatureOutcome {
    Accepted(Signature),
    NoPrediction(QualityVerdict),
}

impl SignatureOutcome {
    pub fn signature(&self) -> Option<&Signature> {
        match self {
            SignatureOutcome::Accepted(s) => Some(s),
            SignatureOutcome::NoPrediction(_) => None,
        }
    }
}

/// Quality-filters the fit and, when accepted, assembles its signature.
pub fn build_signature(
    series: &RoiSeries,
    fit: &FitResult,
    rules: &QualityRules,
) -> Result<SignatureOutcome, FeatureError> {
    signature_from_fit(fit, series.duration(), series.sample_interval(), rules)
}

/// [`build_signature`] without the series: TTP features are scanned up to
/// `duration` with a grid of half the sampling interval.
pub fn signature_from_fit(
    fit: &FitResult,
    duration: f64,
    sample_interval: f64,
    rules: &QualityRules,
) -> Result<SignatureOutcome, FeatureError> {
    let verdict = quality_for_duration(duration, fit, rules);
    if !verdict.accepted {
        return Ok(SignatureOutcome::NoPrediction(verdict));
    }
    let ttp = ttp_features(fit, duration, 0.5 * sample_interval)?;
    let exp = exp_features(&decompose(&fit.params)?);
    let mut all = [0.0; 12];
    all[..4].copy_from_slice(&[ttp.t_max, ttp.t_half_max, ttp.t_ratio, ttp.slope]);
    all[4..].copy_from_slice(&exp);
    Ok(SignatureOutcome::Accepted(Signature::from_array(all)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitter::WeightConfig;
    use crate::model::PerfusionParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_fit(p: PerfusionParams) -> FitResult {
        FitResult {
            params: p,
            objective_value: 0.0,
            l1_relative_error: 0.0,
            n_iterations: 0,
            converged: true,
            weights_used: WeightConfig::default(),
        }
    }

    fn series(duration: f64, dt: f64) -> RoiSeries {
        let n = (duration / dt).round() as usize + 1;
        RoiSeries::new(dt, vec![1.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn overdamped_peak_is_slope_root() {
        let p = PerfusionParams::new(10.0, 2.0, 50.0, 300.0, 0.0, 0.0).unwrap();
        let ttp = ttp_features(&exact_fit(p), 300.0, 0.05).unwrap();
        // Independent root of dy/dt from a central-difference derivative.
        let k = ResponseKernel::new(&p).unwrap();
        let dy = |t: f64| (k.eval(t + 1e-5) - k.eval(t - 1e-5)) / 2e-5;
        let (mut lo, mut hi) = (1.0, 299.0);
        assert!(dy(lo) > 0.0 && dy(hi) < 0.0);
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if dy(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((ttp.t_max - lo).abs() < 1e-6, "{} vs {lo}", ttp.t_max);
    }

    #[test]
    fn fine_grid_argmax_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = PerfusionParams::new(
                rng.random_range(2.0..40.0),
                rng.random_range(0.1..4.0),
                rng.random_range(10.0..100.0),
                rng.random_range(160.0..600.0),
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..10.0),
            )
            .unwrap();
            let step = 0.05;
            let ttp = ttp_features(&exact_fit(p), 300.0, step).unwrap();
            let k = ResponseKernel::new(&p).unwrap();
            let fine = step / 10.0;
            let n = ((300.0 - p.delay) / fine) as usize;
            let (t_best, _) = (0..=n)
                .map(|i| p.delay + i as f64 * fine)
                .map(|t| (t, k.eval(t)))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            assert!((ttp.t_max - t_best).abs() <= step, "{p:?}: {} vs {t_best}", ttp.t_max);
            assert!(ttp.t_half_max > p.delay && ttp.t_half_max < ttp.t_max);
            assert!(ttp.t_ratio > 0.0 && ttp.t_ratio < 1.0);
        }
    }

    #[test]
    fn half_max_lies_on_rising_edge() {
        let p = PerfusionParams::new(15.0, 0.3, 80.0, 250.0, 10.0, 5.0).unwrap();
        let ttp = ttp_features(&exact_fit(p), 300.0, 0.05).unwrap();
        let y = ResponseKernel::new(&p).unwrap();
        let peak = y.eval(ttp.t_max);
        assert!((y.eval(ttp.t_half_max) - (5.0 + 0.5 * (peak - 5.0))).abs() < 1e-9);
        assert!((ttp.slope - (peak - 5.0) / (ttp.t_max - 10.0)).abs() < 1e-12);
    }

    #[test]
    fn non_converged_fit_rejected() {
        let mut fit = exact_fit(PerfusionParams::new(15.0, 1.2, 80.0, 250.0, 10.0, 5.0).unwrap());
        fit.converged = false;
        assert_eq!(ttp_features(&fit, 300.0, 0.05), Err(FeatureError::NotConverged));
    }

    #[test]
    fn exp_features_by_regime() {
        let over = PerfusionParams::new(10.0, 2.0, 50.0, 250.0, 0.0, 0.0).unwrap();
        let f = exp_features(&decompose(&over).unwrap());
        assert!((f[0] - 0.004).abs() < 1e-15);
        assert_eq!((f[3], f[7]), (0.0, 0.0));
        assert!(f[1] >= f[2]);

        let under = PerfusionParams::new(10.0, 0.4, 50.0, 250.0, 0.0, 0.0).unwrap();
        let f = exp_features(&decompose(&under).unwrap());
        assert!((f[1] - 0.04).abs() < 1e-15 && (f[2] - 0.04).abs() < 1e-15);
        assert!(f[3] > 0.0);
    }

    #[test]
    fn wash_out_rate_decreases_with_tau_input() {
        let mut prev = f64::INFINITY;
        for ti in [160.0, 200.0, 300.0, 500.0, 1000.0] {
            let p = PerfusionParams::new(10.0, 0.8, 50.0, ti, 0.0, 0.0).unwrap();
            let f = exp_features(&decompose(&p).unwrap());
            assert!(f[0] < prev);
            prev = f[0];
        }
    }

    #[test]
    fn quality_reasons() {
        let good = PerfusionParams::new(15.0, 1.2, 80.0, 250.0, 10.0, 5.0).unwrap();
        let rules = QualityRules::default();
        let v = quality_filter(&series(300.0, 0.5), &exact_fit(good), &rules);
        assert!(v.accepted && v.reasons.is_empty());

        let v = quality_filter(&series(90.0, 0.5), &exact_fit(good), &rules);
        assert_eq!(v.reasons, vec![QualityReason::TooShort]);

        let mut fit = exact_fit(good);
        fit.l1_relative_error = 0.11;
        assert_eq!(quality_filter(&series(300.0, 0.5), &fit, &rules).reasons, vec![QualityReason::L1Exceeded]);

        let mut p = good;
        p.damping = 12.0;
        p.tau = 100.0;
        let v = quality_filter(&series(300.0, 0.5), &exact_fit(p), &rules);
        assert_eq!(v.reasons, vec![QualityReason::BadDamping, QualityReason::TauTooLarge]);
        assert!(!v.accepted);
    }

    #[test]
    fn build_signature_outcomes() {
        let p = PerfusionParams::new(15.0, 1.2, 80.0, 250.0, 10.0, 5.0).unwrap();
        let s = series(300.0, 0.1);
        let out = build_signature(&s, &exact_fit(p), &QualityRules::default()).unwrap();
        let sig = out.signature().expect("accepted");
        assert!(sig.to_array().iter().all(|v| v.is_finite()));
        assert_eq!(Signature::from_array(sig.to_array()), *sig);

        let short = series(60.0, 0.1);
        match build_signature(&short, &exact_fit(p), &QualityRules::default()).unwrap() {
            SignatureOutcome::NoPrediction(v) => assert_eq!(v.reasons, vec![QualityReason::TooShort]),
            other => panic!("{other:?}"),
        }
    }
}
