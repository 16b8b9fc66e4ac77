//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances and budgets are pinned below.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use perfusion_core::classify::{aggregate_case, loo_evaluate, CaseAggregationConfig, ClassifierConfig, SignatureCohort};
use perfusion_core::fitter::{fit, weight, FitBounds, FitOptions, FitResult, WeightConfig};
use perfusion_core::ingest::{threshold_dispersion, RoiSeries, TissueLabel};
use perfusion_core::model::{decompose, ode_oracle, response_curve, PerfusionParams};
use perfusion_core::pipeline::{fit_cohort, CohortFits, FitSettings};
use perfusion_core::signature::{quality_filter, QualityReason, QualityRules};
use perfusion_core::synth::{generate_cohort, shuffle_pathology, synth_series, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_DRAWS: usize = 1000;
const ORACLE_TIMES: usize = 50;
const ORACLE_TOL: f64 = 1e-8;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);

const MODAL_DRAWS: usize = 1000;
const MODAL_IDENTITY_TOL: f64 = 1e-9;
const MODAL_RECON_TOL: f64 = 1e-8;
const MODAL_EXCLUDE_BAND: f64 = 1e-3;

const ROUND_TRIP_ROIS: usize = 100;
const NOISELESS_TOL: f64 = 0.01;
const NOISELESS_MIN_OK: usize = 99;
const NOISELESS_BUDGET: Duration = Duration::from_secs(300);
const NOISY_TOL: f64 = 0.05;
const NOISY_MIN_OK: usize = 90;
const NOISE_FRACTION: f64 = 0.02;

const WEIGHT_TOL: f64 = 1e-12;
const AGGREGATION_TOL: f64 = 1e-12;

const E2E_MIN_CASE_ACCURACY: f64 = 0.95;
const E2E_MIN_SENSITIVITY: f64 = 0.95;
const E2E_MIN_SPECIFICITY: f64 = 0.90;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const E2E_SEED: u64 = 2024;
/// Brier score of the overlapping run must beat the uninformative 0.25.
const OVERLAP_MAX_BRIER: f64 = 0.25;
const NULL_BAND: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_params(rng: &mut ChaCha8Rng, damping: (f64, f64)) -> PerfusionParams {
    let tau = rng.random_range(0.5..60.0);
    PerfusionParams::new(
        tau,
        rng.random_range(damping.0..=damping.1),
        rng.random_range(1.0..150.0),
        rng.random_range(150.0f64.max(1.5 * tau)..1500.0),
        rng.random_range(0.0..40.0),
        rng.random_range(0.0..30.0),
    )
    .unwrap()
}

/// Relative errors are measured against the largest response magnitude on
/// the sample grid, so points where the curve passes through zero do not
/// divide by zero.
fn max_scaled_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

fn closed_form_vs_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_params = None;
    for _ in 0..ORACLE_DRAWS {
        let p = random_params(&mut rng, (0.1, 5.0));
        let mut times: Vec<f64> = (0..ORACLE_TIMES).map(|_| rng.random_range(0.0..300.0)).collect();
        times.sort_by(f64::total_cmp);
        let closed = response_curve(&p, &times).unwrap();
        let ode = ode_oracle(&p, &times).unwrap();
        let err = max_scaled_error(&closed, &ode);
        if err > worst {
            worst = err;
            worst_params = Some(p);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("{ORACLE_DRAWS} draws, max rel err {worst:.2e} (tol {ORACLE_TOL:e}) at {worst_params:?}, {elapsed:.1?}"),
    )
}

fn modal_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_moment, mut worst_recon) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    while n < MODAL_DRAWS {
        let p = random_params(&mut rng, (0.1, 5.0));
        if (p.damping - 1.0).abs() <= MODAL_EXCLUDE_BAND {
            continue;
        }
        n += 1;
        let m = decompose(&p).unwrap();
        let a = m.amplitudes;
        let l = m.rates;
        let sum: Complex64 = a.iter().sum();
        let moment: Complex64 = a.iter().zip(&l).map(|(a, l)| a * l).sum();
        let sum_scale: f64 = a.iter().map(|a| a.norm()).sum();
        let moment_scale: f64 = a.iter().zip(&l).map(|(a, l)| (a * l).norm()).sum();
        worst_sum = worst_sum.max(sum.norm() / sum_scale);
        worst_moment = worst_moment.max(moment.norm() / moment_scale);

        let times: Vec<f64> = (1..=50).map(|k| p.delay + k as f64 * (300.0 - p.delay) / 50.0).collect();
        let direct: Vec<f64> = response_curve(&p, &times).unwrap().iter().map(|y| y - p.offset).collect();
        let recon: Vec<f64> = times.iter().map(|t| m.reconstruct(t - p.delay)).collect();
        worst_recon = worst_recon.max(max_scaled_error(&recon, &direct));
    }
    check(
        worst_sum <= MODAL_IDENTITY_TOL && worst_moment <= MODAL_IDENTITY_TOL && worst_recon <= MODAL_RECON_TOL,
        format!("ΣA {worst_sum:.2e}, ΣAλ {worst_moment:.2e} (tol {MODAL_IDENTITY_TOL:e}); reconstruction {worst_recon:.2e} (tol {MODAL_RECON_TOL:e})"),
    )
}

/// Parameter region of the round-trip draws.
fn round_trip_params(rng: &mut ChaCha8Rng) -> PerfusionParams {
    PerfusionParams::new(
        rng.random_range(5.0..30.0),
        rng.random_range(0.5..2.0),
        rng.random_range(40.0..150.0),
        rng.random_range(160.0..400.0),
        rng.random_range(5.0..20.0),
        rng.random_range(5.0..20.0),
    )
    .unwrap()
}

fn within(fitted: &PerfusionParams, truth: &PerfusionParams, tol: f64) -> bool {
    fitted
        .to_array()
        .iter()
        .zip(truth.to_array())
        .all(|(f, t)| (f - t).abs() <= tol * t.abs())
}

/// Reference parameters of the noisy round trip: 100 noise realisations
/// of one series.
fn reference_params() -> PerfusionParams {
    PerfusionParams::new(15.0, 1.2, 80.0, 250.0, 10.0, 5.0).unwrap()
}

fn round_trip(
    noise: f64,
    seed: u64,
    draw: impl Fn(&mut ChaCha8Rng) -> PerfusionParams,
) -> (usize, Duration, Vec<(PerfusionParams, FitResult)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut ok = 0;
    let mut misses = Vec::new();
    for i in 0..ROUND_TRIP_ROIS {
        let truth = draw(&mut rng);
        let clean_peak = response_curve(&truth, &(0..3001).map(|k| k as f64 * 0.1).collect::<Vec<_>>())
            .unwrap()
            .into_iter()
            .fold(0.0, f64::max);
        let sigma = noise * clean_peak;
        let series = synth_series(&truth, 0.1, 300.0, sigma, sigma.max(1.0), &mut rng).unwrap();
        let series = threshold_dispersion(series, 1.0).unwrap();
        let opts = FitOptions {
            seed: i as u64,
            ..Default::default()
        };
        let res = fit(&series, &WeightConfig::default(), &FitBounds::default(), &opts).unwrap();
        let tol = if noise == 0.0 { NOISELESS_TOL } else { NOISY_TOL };
        if res.converged && within(&res.params, &truth, tol) {
            ok += 1;
        } else {
            misses.push((truth, res));
        }
    }
    (ok, start.elapsed(), misses)
}

fn describe_misses(misses: &[(PerfusionParams, FitResult)]) -> String {
    misses
        .iter()
        .take(3)
        .map(|(t, r)| format!("\n      truth {:?}\n      fit   {:?} (converged {})", t.to_array(), r.params.to_array(), r.converged))
        .collect()
}

fn noiseless_round_trip() -> Outcome {
    let (ok, elapsed, misses) = round_trip(0.0, 3, round_trip_params);
    check(
        ok >= NOISELESS_MIN_OK && elapsed < NOISELESS_BUDGET,
        format!("{ok}/{ROUND_TRIP_ROIS} within {NOISELESS_TOL} (need {NOISELESS_MIN_OK}), {elapsed:.1?}{}", describe_misses(&misses)),
    )
}

fn noisy_round_trip() -> Outcome {
    let (ok, elapsed, misses) = round_trip(NOISE_FRACTION, 4, |_| reference_params());
    // Same noise over the whole draw region. Reported, not gated: there the
    // 5 % band sits at the estimator's statistical limit (every miss has a
    // lower objective than the truth).
    let (broad, _, _) = round_trip(NOISE_FRACTION, 4, round_trip_params);
    println!("INFO fit_round_trip_noisy_broad: {broad}/{ROUND_TRIP_ROIS} within {NOISY_TOL} over the random draw region");
    check(
        ok >= NOISY_MIN_OK,
        format!("{ok}/{ROUND_TRIP_ROIS} noise realisations within {NOISY_TOL} (need {NOISY_MIN_OK}), {elapsed:.1?}{}", describe_misses(&misses)),
    )
}

fn weight_function() -> Outcome {
    let cfg = WeightConfig {
        w1: 10.0,
        w2: 1.0,
        t0: 100.0,
    };
    let mut worst = 0.0f64;
    for duration in [150.0, 200.0, 300.0, 600.0] {
        let at_t0 = weight(cfg.t0, &cfg, duration).unwrap();
        let after = weight(cfg.t0 * (1.0 + f64::EPSILON), &cfg, duration).unwrap();
        let end = weight(duration, &cfg, duration).unwrap();
        worst = worst.max((at_t0 - cfg.w1).abs()).max((after - cfg.w1).abs()).max((end - cfg.w2).abs());
    }
    check(worst <= WEIGHT_TOL, format!("max deviation {worst:.2e} (tol {WEIGHT_TOL:e})"))
}

fn quality_filters() -> Outcome {
    let good = PerfusionParams::new(15.0, 1.2, 80.0, 250.0, 10.0, 5.0).unwrap();
    let fit_of = |p: PerfusionParams, l1: f64| FitResult {
        params: p,
        objective_value: 0.0,
        l1_relative_error: l1,
        n_iterations: 1,
        converged: true,
        weights_used: WeightConfig::default(),
    };
    let series = |duration: f64| {
        let n = (duration / 0.5) as usize + 1;
        RoiSeries::new(0.5, vec![1.0; n], vec![1.0; n]).unwrap()
    };
    let rules = QualityRules::default();
    let cases = [
        ("too_short", series(90.0), fit_of(good, 0.01), vec![QualityReason::TooShort]),
        (
            "bad_damping",
            series(300.0),
            fit_of(PerfusionParams { damping: 12.0, ..good }, 0.01),
            vec![QualityReason::BadDamping],
        ),
        (
            "tau_too_large",
            series(300.0),
            fit_of(PerfusionParams { tau: 100.0, ..good }, 0.01),
            vec![QualityReason::TauTooLarge],
        ),
        ("l1_exceeded", series(300.0), fit_of(good, 0.11), vec![QualityReason::L1Exceeded]),
        ("accepted", series(300.0), fit_of(good, 0.01), vec![]),
    ];
    let mut bad = Vec::new();
    for (name, s, f, expected) in cases {
        let v = quality_filter(&s, &f, &rules);
        if v.reasons != expected || v.accepted != expected.is_empty() {
            bad.push(format!("{name}: got {:?}", v.reasons));
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "each fixture yields exactly its reason".into() } else { bad.join("; ") })
}

fn aggregation_formula() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in 1..=20usize {
        for c in 0..=n {
            for i in 0..=10 {
                for j in 0..=10 {
                    let (p_fp, p_fn) = (0.05 * i as f64, 0.05 * j as f64);
                    let got = aggregate_case(n, c, &CaseAggregationConfig { p_fp, p_fn }).unwrap();
                    let direct = (c as f64 / n as f64) * (1.0 - p_fp) + ((n - c) as f64 / n as f64) * p_fn;
                    worst = worst.max((got - direct).abs());
                    count += 1;
                }
            }
        }
    }
    check(worst <= AGGREGATION_TOL, format!("{count} combinations, max deviation {worst:.2e}"))
}

fn brier(cohort: &SignatureCohort, report: &perfusion_core::EvalReport) -> f64 {
    let _ = cohort;
    let (mut sum, mut n) = (0.0, 0);
    for p in &report.patients {
        for r in &p.rois {
            if let Some(q) = r.p_cancer {
                let truth = if r.label == TissueLabel::Cancer { 1.0 } else { 0.0 };
                sum += (q - truth) * (q - truth);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

fn end_to_end(fits: &CohortFits, elapsed_fit: Duration) -> Outcome {
    let start = Instant::now();
    let cohort = fits.to_signature_cohort();
    let report = loo_evaluate(&cohort, &ClassifierConfig::default()).unwrap();
    let elapsed = elapsed_fit + start.elapsed();
    let sens = report.sensitivity.unwrap_or(0.0);
    let spec = report.specificity.unwrap_or(0.0);
    let cancer = cohort.patients.iter().filter(|p| p.is_cancer()).count();
    check(
        report.case_accuracy >= E2E_MIN_CASE_ACCURACY
            && sens >= E2E_MIN_SENSITIVITY
            && spec >= E2E_MIN_SPECIFICITY
            && report.confusion.tp + report.confusion.fn_ == cancer
            && elapsed < E2E_BUDGET,
        format!(
            "case acc {:.3}, sens {sens:.3}, spec {spec:.3}, roi acc {:.3}, {} rejected ROIs, {elapsed:.1?}",
            report.case_accuracy,
            report.roi_accuracy.unwrap_or(0.0),
            fits.rois().filter(|r| r.signature.is_none()).count()
        ),
    )
}

fn overlapping_profiles(settings: &FitSettings) -> Outcome {
    let cohort = generate_cohort(&SynthConfig::overlapping(), E2E_SEED).unwrap();
    let fits = fit_cohort(&cohort.dataset, settings);
    let sigs = fits.to_signature_cohort();
    let report = loo_evaluate(&sigs, &ClassifierConfig::default()).unwrap();
    let probs_ok = report.patients.iter().all(|p| {
        p.probability.is_none_or(|q| (0.0..=1.0).contains(&q)) && p.rois.iter().all(|r| r.p_cancer.is_none_or(|q| (0.0..=1.0).contains(&q)))
    });
    let b = brier(&sigs, &report);
    check(
        probs_ok && b < OVERLAP_MAX_BRIER,
        format!(
            "case acc {:.3}, roi acc {:.3}, ROI Brier {b:.3} (max {OVERLAP_MAX_BRIER})",
            report.case_accuracy,
            report.roi_accuracy.unwrap_or(0.0)
        ),
    )
}

fn null_control(fits: &CohortFits, dataset: &perfusion_core::CohortDataset) -> Outcome {
    let shuffled = shuffle_pathology(dataset, E2E_SEED ^ 0xdead_beef);
    let mut relabeled = fits.clone();
    for (pf, ps) in relabeled.patients.iter_mut().zip(&shuffled.patients) {
        assert_eq!(pf.patient_id, ps.patient_id);
        pf.pathology = ps.pathology;
        for (rf, rs) in pf.rois.iter_mut().zip(&ps.rois) {
            assert_eq!(rf.roi_id, rs.roi_id);
            rf.label = rs.label;
        }
    }
    let cohort = relabeled.to_signature_cohort();
    let report = loo_evaluate(&cohort, &ClassifierConfig::default()).unwrap();
    let n = cohort.patients.len() as f64;
    let cancer = cohort.patients.iter().filter(|p| p.is_cancer()).count() as f64;
    let majority = (cancer / n).max(1.0 - cancer / n);
    check(
        (report.case_accuracy - majority).abs() <= NULL_BAND,
        format!("case acc {:.3} vs majority {majority:.3} (band ±{NULL_BAND})", report.case_accuracy),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    run("closed_form_vs_ode_oracle", &mut closed_form_vs_oracle);
    run("modal_identities", &mut modal_identities);
    run("fit_round_trip_noiseless", &mut noiseless_round_trip);
    run("fit_round_trip_noisy", &mut noisy_round_trip);
    run("weight_function", &mut weight_function);
    run("quality_filters", &mut quality_filters);
    run("aggregation_formula", &mut aggregation_formula);

    let settings = FitSettings {
        options: FitOptions {
            seed: E2E_SEED,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let cohort = generate_cohort(&SynthConfig::default(), E2E_SEED).unwrap();
    let fits = fit_cohort(&cohort.dataset, &settings);
    let fit_time = start.elapsed();
    run("end_to_end_synthetic", &mut || end_to_end(&fits, fit_time));
    run("end_to_end_overlapping", &mut || overlapping_profiles(&settings));
    run("null_control", &mut || null_control(&fits, &cohort.dataset));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
