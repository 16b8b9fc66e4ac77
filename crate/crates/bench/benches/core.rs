use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use perfusion_core::classify::gbdt::{Gbdt, GbdtParams};
use perfusion_core::fitter::{fit, FitBounds, FitOptions, WeightConfig};
use perfusion_core::model::{decompose, response_curve, PerfusionParams};
use perfusion_core::synth::synth_series;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(damping: f64) -> PerfusionParams {
    PerfusionParams::new(15.0, damping, 80.0, 250.0, 10.0, 5.0).unwrap()
}

fn grid() -> Vec<f64> {
    (0..3001).map(|k| k as f64 * 0.1).collect()
}

fn response(c: &mut Criterion) {
    let times = grid();
    let mut g = c.benchmark_group("response_curve_3001");
    for (name, d) in [("under", 0.5), ("over", 1.8), ("near_critical", 1.0 + 1e-8)] {
        let p = params(d);
        g.bench_function(name, |b| b.iter(|| response_curve(black_box(&p), &times).unwrap()));
    }
    g.finish();
    let p = params(1.8);
    c.bench_function("decompose", |b| b.iter(|| decompose(black_box(&p)).unwrap()));
}

fn fitting(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series = synth_series(&params(1.2), 0.1, 300.0, 1.6, 1.6, &mut rng).unwrap();
    let mut g = c.benchmark_group("fit_3001");
    g.sample_size(10);
    for starts in [1, 5] {
        let opts = FitOptions {
            starts,
            ..Default::default()
        };
        g.bench_function(format!("{starts}_starts"), |b| {
            b.iter(|| fit(black_box(&series), &WeightConfig::default(), &FitBounds::default(), &opts).unwrap())
        });
    }
    g.finish();
}

fn boosting(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400;
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..12).map(|f| rng.random_range(0.0..1.0) + if f < 3 { (i % 2) as f64 * 0.5 } else { 0.0 }).collect())
        .collect();
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut g = c.benchmark_group("gbdt_train_400x12");
    g.sample_size(10);
    g.bench_function("200_trees", |b| b.iter(|| Gbdt::fit(black_box(&x), &y, 2, &GbdtParams::default())));
    g.finish();
    let model = Gbdt::fit(&x, &y, 2, &GbdtParams::default());
    c.bench_function("gbdt_predict", |b| b.iter(|| model.predict_proba(black_box(&x[0]))));
}

criterion_group!(benches, response, fitting, boosting);
criterion_main!(benches);
