//! Weighted, box-constrained least-squares estimation of [`PerfusionParams`]
//! from a region series.
//!
//! The residual of sample `k` is `sqrt(W(t_k)) / S(t_k) · (y(t_k) - I(t_k))`
//! where `W` emphasises the wash-in phase and `S` is the floored pixel
//! dispersion, so the objective is `J = Σ W/S² (y - I)²`.

pub mod lsq;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RoiSeries;
use crate::model::{ModelError, PerfusionParams, ResponseKernel};
use lsq::{minimize_bounded, LeastSquaresProblem, SolverOptions, Termination};

/// Minimum number of samples accepted by [`fit`].
pub const MIN_FIT_SAMPLES: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("series has {0} samples, at least {MIN_FIT_SAMPLES} are required")]
    InputTooShort(usize),
    #[error("time {t} outside [0, {duration}]")]
    Domain { t: f64, duration: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Piecewise wash-in weighting: `W_1` up to `t_0`, then exponential decay
/// reaching `W_2` at the end of the series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub w1: f64,
    pub w2: f64,
    pub t0: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            w1: 10.0,
            w2: 1.0,
            t0: 100.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.w1 > self.w2 && self.w2 > 0.0) || !self.w1.is_finite() {
            return Err(FitError::Config(format!(
                "weights need w1 > w2 > 0, got w1 = {}, w2 = {}",
                self.w1, self.w2
            )));
        }
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(FitError::Config(format!("t0 = {} must be > 0", self.t0)));
        }
        Ok(())
    }
}

/// `W(t)` for a series of duration `duration`. When the series ends before
/// `t_0` the weight is `W_1` throughout.
pub fn weight(t: f64, cfg: &WeightConfig, duration: f64) -> Result<f64, FitError> {
    if !(t >= 0.0) || t > duration * (1.0 + 1e-12) {
        return Err(FitError::Domain { t, duration });
    }
    if t <= cfg.t0 {
        return Ok(cfg.w1);
    }
    let ratio = cfg.w1 / cfg.w2;
    let span = duration - cfg.t0;
    Ok(cfg.w1 * ratio.powf(cfg.t0 / span) * (-ratio.ln() / span * t).exp())
}

/// Per-parameter `[lower, upper]` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBounds {
    pub tau: [f64; 2],
    pub damping: [f64; 2],
    pub gain: [f64; 2],
    pub tau_input: [f64; 2],
    pub delay: [f64; 2],
    pub offset: [f64; 2],
}

impl Default for FitBounds {
    /// `τ < 100` and `τ_i > 150` separate wash-in from wash-out; the remaining
    /// bounds only keep `D, K, θ, y_dc` strictly positive and finite.
    fn default() -> Self {
        Self {
            tau: [0.1, 100.0],
            damping: [0.02, 20.0],
            gain: [1e-3, 1e5],
            tau_input: [150.0, 1e4],
            delay: [1e-3, 250.0],
            offset: [1e-6, 1e5],
        }
    }
}

impl FitBounds {
    pub fn lower(&self) -> [f64; 6] {
        self.as_pairs().map(|p| p[0])
    }

    pub fn upper(&self) -> [f64; 6] {
        self.as_pairs().map(|p| p[1])
    }

    fn as_pairs(&self) -> [[f64; 2]; 6] {
        [self.tau, self.damping, self.gain, self.tau_input, self.delay, self.offset]
    }

    pub fn midpoint(&self) -> [f64; 6] {
        self.as_pairs().map(|p| 0.5 * (p[0] + p[1]))
    }

    pub fn contains(&self, p: &PerfusionParams) -> bool {
        p.to_array()
            .iter()
            .zip(self.as_pairs())
            .all(|(v, [lo, hi])| *v >= lo && *v <= hi)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        for (name, [lo, hi]) in crate::model::PARAM_NAMES.iter().zip(self.as_pairs()) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(FitError::Config(format!("bounds for {name}: need finite lower < upper")));
            }
            if lo <= 0.0 {
                return Err(FitError::Config(format!("lower bound for {name} must be > 0")));
            }
        }
        if self.tau[1] >= self.tau_input[0] {
            return Err(FitError::Config(
                "upper bound of tau must lie below the lower bound of tau_input".into(),
            ));
        }
        Ok(())
    }

    fn clamp(&self, x: [f64; 6]) -> [f64; 6] {
        let pairs = self.as_pairs();
        std::array::from_fn(|j| x[j].clamp(pairs[j][0], pairs[j][1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub starts: usize,
    pub gtol: f64,
    pub xtol: f64,
    /// Log-normal spread of the perturbed starts.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            starts: 5,
            gtol: 1e-8,
            xtol: 1e-10,
            perturbation: 0.4,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: PerfusionParams,
    pub objective_value: f64,
    pub l1_relative_error: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub weights_used: WeightConfig,
}

/// `J = Σ W(t)/S(t)² · (y(t) - I(t))²`. Dispersion must already be floored.
pub fn objective(
    params: &PerfusionParams,
    series: &RoiSeries,
    cfg: &WeightConfig,
) -> Result<f64, FitError> {
    let kernel = ResponseKernel::new(params)?;
    let duration = series.duration();
    let mut total = 0.0;
    for (k, (&data, &s)) in series.intensity().iter().zip(series.dispersion()).enumerate() {
        let t = series.time(k);
        let w = weight(t, cfg, duration)?;
        let resid = kernel.eval(t) - data;
        total += w / (s * s) * resid * resid;
    }
    Ok(total)
}

/// `Σ |y - I| / Σ |I|` on the unweighted residual.
pub fn l1_relative_error(params: &PerfusionParams, series: &RoiSeries) -> Result<f64, FitError> {
    let kernel = ResponseKernel::new(params)?;
    let (num, den) = series
        .intensity()
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(n, d), (k, &data)| {
            (n + (kernel.eval(series.time(k)) - data).abs(), d + data.abs())
        });
    Ok(if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Residual model for one series.
struct PerfusionProblem {
    times: Vec<f64>,
    data: Vec<f64>,
    sqrt_weight: Vec<f64>,
}

impl PerfusionProblem {
    fn new(series: &RoiSeries, cfg: &WeightConfig) -> Result<Self, FitError> {
        let duration = series.duration();
        let times: Vec<f64> = series.times().collect();
        let sqrt_weight = times
            .iter()
            .zip(series.dispersion())
            .map(|(&t, &s)| Ok(weight(t, cfg, duration)?.sqrt() / s))
            .collect::<Result<Vec<_>, FitError>>()?;
        Ok(Self {
            times,
            data: series.intensity().to_vec(),
            sqrt_weight,
        })
    }

    /// Excitation kernel with unit gain at `x` (gain and offset ignored).
    fn unit_kernel(x: &[f64]) -> ResponseKernel {
        let p = PerfusionParams {
            tau: x[0],
            damping: x[1],
            gain: 1.0,
            tau_input: x[3],
            delay: x[4],
            offset: 0.0,
        };
        ResponseKernel::new(&p).expect("fit bounds keep parameters in the model domain")
    }
}

// Columns of the parameter vector that are differentiated numerically.
const NUMERIC_COLUMNS: [usize; 3] = [0, 1, 3];
const FD_RELATIVE_STEP: f64 = 1e-5;

impl LeastSquaresProblem for PerfusionProblem {
    fn n_params(&self) -> usize {
        6
    }

    fn n_residuals(&self) -> usize {
        self.times.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let kernel = Self::unit_kernel(x);
        let (gain, delay, offset) = (x[2], x[4], x[5]);
        for (k, o) in out.iter_mut().enumerate() {
            let y = offset + gain * kernel.excitation(self.times[k] - delay).0;
            *o = self.sqrt_weight[k] * (y - self.data[k]);
        }
    }

    /// Gain, delay and offset columns are analytic; `τ`, `D`, `τ_i` use
    /// central differences.
    fn jacobian(&self, x: &[f64], _residuals: &[f64], out: &mut DMatrix<f64>) {
        let base = Self::unit_kernel(x);
        let mut shifted = Vec::with_capacity(NUMERIC_COLUMNS.len());
        for &j in &NUMERIC_COLUMNS {
            let h = FD_RELATIVE_STEP * x[j];
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[j] += h;
            down[j] -= h;
            shifted.push((j, Self::unit_kernel(&up), Self::unit_kernel(&down), 2.0 * h));
        }
        let (gain, delay) = (x[2], x[4]);
        for k in 0..self.times.len() {
            let s = self.times[k] - delay;
            let sw = self.sqrt_weight[k];
            let (g, dg) = base.excitation(s);
            out[(k, 2)] = sw * g;
            out[(k, 4)] = -sw * gain * dg;
            out[(k, 5)] = sw;
            for (j, up, down, span) in &shifted {
                out[(k, *j)] = sw * gain * (up.excitation(s).0 - down.excitation(s).0) / span;
            }
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// First time, linearly interpolated between samples, at which the curve
/// exceeds `level` (searched up to `limit`).
fn crossing_time(series: &RoiSeries, limit: usize, level: f64) -> f64 {
    let data = series.intensity();
    match data[..=limit].iter().position(|&v| v > level) {
        Some(0) | None => series.time(0),
        Some(k) => {
            let frac = (level - data[k - 1]) / (data[k] - data[k - 1]);
            series.time(k - 1) + frac * series.sample_interval()
        }
    }
}

/// Heuristic starting point derived from the raw curve, clamped to `bounds`.
pub fn initialize(series: &RoiSeries, bounds: &FitBounds) -> PerfusionParams {
    let data = series.intensity();
    let dt = series.sample_interval();
    let n = data.len();
    let (lo, hi) = (bounds.lower(), bounds.upper());

    let peak_idx = data
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > data[best] { k } else { best });
    let peak = data[peak_idx];
    let overall_median = median(&mut data.to_vec());

    let floor = data.iter().cloned().fold(f64::INFINITY, f64::min);
    if peak - floor <= 1e-9 * overall_median.abs().max(1.0) {
        // Flat curve: no wash-in to anchor on.
        let mid = bounds.midpoint();
        let x = [mid[0], 1.2, lo[2], mid[3], dt, overall_median];
        return PerfusionParams::from_array(bounds.clamp(x));
    }
    if peak_idx == 0 {
        let mid = bounds.midpoint();
        let x = [mid[0], mid[1], peak - floor, mid[3], mid[4], overall_median];
        return PerfusionParams::from_array(bounds.clamp(x));
    }

    // Baseline window: well before the curve first reaches 10% of its rise.
    let lowest = data[..=peak_idx].iter().cloned().fold(f64::INFINITY, f64::min);
    let early = data
        .iter()
        .position(|&v| v > lowest + 0.1 * (peak - lowest))
        .unwrap_or(peak_idx);
    let base_n = (early / 3).clamp(1, (n / 20).max(3));
    let mut window = data[..base_n].to_vec();
    let baseline = median(&mut window);
    let mut deviations: Vec<f64> = window.iter().map(|v| (v - baseline).abs()).collect();
    let noise = 1.4826 * median(&mut deviations);
    let rise = (peak - baseline).max(f64::MIN_POSITIVE);

    // The response leaves the baseline quadratically in (t - θ), so the
    // crossing times of two levels a < b = 4a extrapolate back to θ = 2 t_a - t_b.
    let level = (3.0 * noise).max(0.02 * rise).min(0.2 * rise);
    let t_a = crossing_time(series, peak_idx, baseline + level);
    let t_b = crossing_time(series, peak_idx, baseline + 4.0 * level);
    let delay = (2.0 * t_a - t_b).clamp(dt.min(t_a), t_a);
    let onset = ((delay / dt).floor() as usize).min(peak_idx);
    let offset = if onset > 0 {
        median(&mut data[..onset].to_vec())
    } else {
        baseline
    };
    let gain = peak - offset;
    // A step response with D near 1 reaches half height about 1.8 τ after onset.
    let t_half = crossing_time(series, peak_idx, offset + 0.5 * gain);
    let tau = ((t_half - delay) / 1.8).max(dt);

    // Single-exponential fit of the tail above the offset.
    let tail: Vec<(f64, f64)> = (peak_idx..n)
        .filter(|&k| data[k] - offset > 0.05 * gain)
        .map(|k| (series.time(k), (data[k] - offset).ln()))
        .collect();
    let tail_tau = if tail.len() >= 3 {
        let m = tail.len() as f64;
        let (st, sy) = tail.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t, b + y));
        let (mt, my) = (st / m, sy / m);
        let (sxy, sxx) = tail
            .iter()
            .fold((0.0, 0.0), |(a, b), (t, y)| (a + (t - mt) * (y - my), b + (t - mt).powi(2)));
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        if slope < 0.0 {
            -1.0 / slope
        } else {
            hi[3]
        }
    } else {
        bounds.midpoint()[3]
    };
    let tau_input = tail_tau.max(1.2 * lo[3]);

    PerfusionParams::from_array(bounds.clamp([tau, 1.2, gain, tau_input, delay, offset]))
}

/// Fits the perfusion model with multiple starts and returns the lowest-cost
/// solution. Dispersion must be strictly positive (see
/// [`crate::ingest::threshold_dispersion`]).
pub fn fit(
    series: &RoiSeries,
    cfg: &WeightConfig,
    bounds: &FitBounds,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    if series.len() < MIN_FIT_SAMPLES {
        return Err(FitError::InputTooShort(series.len()));
    }
    cfg.validate()?;
    bounds.validate()?;
    if opts.starts == 0 {
        return Err(FitError::Config("at least one start is required".into()));
    }
    if let Some(k) = series.dispersion().iter().position(|&s| !(s > 0.0)) {
        return Err(FitError::InvalidInput(format!(
            "dispersion[{k}] is zero; floor the dispersion before fitting"
        )));
    }

    // The arrival delay cannot sit at the very end of the record.
    let mut bounds = *bounds;
    let delay_cap = 0.9 * series.duration();
    if delay_cap > bounds.delay[0] {
        bounds.delay[1] = bounds.delay[1].min(delay_cap);
    }

    let problem = PerfusionProblem::new(series, cfg)?;
    let solver = SolverOptions {
        max_iterations: opts.max_iterations,
        gtol: opts.gtol,
        xtol: opts.xtol,
    };
    let (lower, upper) = (bounds.lower(), bounds.upper());

    let start = initialize(series, &bounds).to_array();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<lsq::SolverReport> = None;
    for s in 0..opts.starts {
        let x0 = if s == 0 {
            start
        } else {
            let mut x = start;
            for v in x.iter_mut().take(5) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v *= (opts.perturbation * z).exp();
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            x[5] *= (0.25 * opts.perturbation * z).exp();
            bounds.clamp(x)
        };
        let rep = minimize_bounded(&problem, &x0, &lower, &upper, &solver);
        if best.as_ref().is_none_or(|b| rep.cost < b.cost) {
            best = Some(rep);
        }
    }
    let best = best.expect("at least one start");
    let params = PerfusionParams::from_array(std::array::from_fn(|j| best.x[j]));
    Ok(FitResult {
        params,
        objective_value: best.cost,
        l1_relative_error: l1_relative_error(&params, series)?,
        n_iterations: best.iterations,
        converged: best.termination != Termination::MaxIterations,
        weights_used: *cfg,
    })
}
