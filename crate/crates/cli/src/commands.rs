use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use perfusion_core::classify::{self, loo_evaluate, save_model, EvalReport, SignatureCohort};
use perfusion_core::fitter::weight;
use perfusion_core::ingest::{load_cohort, load_manifest, load_series};
use perfusion_core::model::ResponseKernel;
use perfusion_core::pipeline::{fit_cohort, process_roi, write_fits_csv, write_signatures_csv, CohortFits};
use perfusion_core::synth::{generate_cohort, shuffle_pathology, write_cohort, SynthConfig};
use perfusion_core::RunConfig;
use serde_json::json;

use crate::{Cli, Command};

pub const EXIT_ERROR: u8 = 1;
/// Some regions could not be read or fitted; the rest were processed.
pub const EXIT_PARTIAL: u8 = 2;
/// `inspect`: the region carries no prediction.
pub const EXIT_NO_PREDICTION: u8 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.fit.options.seed = seed;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Synth {
            overlapping,
            shuffle_labels,
        } => synth(&cfg, &cli.out, *overlapping, *shuffle_labels),
        Command::Fit { manifest } => fit(&cfg, &cli.out, manifest),
        Command::Features { fits } => features(&cfg, &cli.out, fits),
        Command::Train { signatures } => train(&cfg, &cli.out, signatures),
        Command::Evaluate { manifest } => evaluate(&cfg, &cli.out, manifest),
        Command::Inspect { roi_file } => inspect(&cfg, &cli.out, roi_file),
    }
}

fn synth(cfg: &RunConfig, out: &Path, overlapping: bool, shuffle: bool) -> Result<ExitCode> {
    let synth_cfg = if overlapping {
        SynthConfig {
            normal: SynthConfig::overlapping().normal,
            benign: SynthConfig::overlapping().benign,
            cancer: SynthConfig::overlapping().cancer,
            ..cfg.synth.clone()
        }
    } else {
        cfg.synth.clone()
    };
    let cohort = generate_cohort(&synth_cfg, cfg.seed)?;
    let dataset = if shuffle {
        shuffle_pathology(&cohort.dataset, cfg.seed)
    } else {
        cohort.dataset
    };
    write_cohort(&dataset, Some(&cohort.truth), out)?;
    println!(
        "wrote {} patients, {} regions to {}",
        dataset.patients.len(),
        dataset.n_rois(),
        out.join("manifest.toml").display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads and fits a manifest; returns the fits and the number of regions
/// that could not be read.
fn load_and_fit(cfg: &RunConfig, manifest: &Path) -> Result<(CohortFits, usize)> {
    let manifest = load_manifest(manifest)?;
    let (dataset, failures) = load_cohort(&manifest);
    for f in &failures {
        eprintln!("skipping patient {} roi {}: {}", f.patient_id, f.roi_id, f.error);
    }
    let fits = fit_cohort(&dataset, &cfg.fit);
    for r in fits.rois().filter(|r| r.error.is_some()) {
        eprintln!("patient {} roi {}: {}", r.patient_id, r.roi_id, r.error.as_deref().unwrap_or(""));
    }
    Ok((fits, failures.len()))
}

fn exit_for(failures: usize) -> ExitCode {
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    }
}

fn fit(cfg: &RunConfig, out: &Path, manifest: &Path) -> Result<ExitCode> {
    let (fits, load_failures) = load_and_fit(cfg, manifest)?;
    write_fits_csv(&fits, create(&out.join("fits.csv"))?)?;
    write_json(&fits, &out.join("fits.json"))?;
    let failures = load_failures + fits.n_failed();
    println!("fitted {} regions, {failures} failed", fits.rois().count());
    Ok(exit_for(failures))
}

fn features(cfg: &RunConfig, out: &Path, fits_path: &Path) -> Result<ExitCode> {
    let mut fits: CohortFits = read_json(fits_path)?;
    for p in fits.patients.iter_mut() {
        for r in p.rois.iter_mut() {
            r.reassess(&cfg.fit.quality);
        }
    }
    write_signatures_csv(&fits, create(&out.join("signatures.csv"))?)?;
    write_json(&fits.to_signature_cohort(), &out.join("signatures.json"))?;
    let accepted = fits.rois().filter(|r| r.signature.is_some()).count();
    println!("{accepted} of {} regions accepted", fits.rois().count());
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, out: &Path, signatures: &Path) -> Result<ExitCode> {
    let cohort: SignatureCohort = read_json(signatures)?;
    let model = classify::train_cohort(&cohort, &cfg.classifier)?;
    save_model(&model, &out.join("model.json"))?;
    println!("trained {:?} model on {} patients", model.scheme, cohort.patients.len());
    Ok(ExitCode::SUCCESS)
}

fn write_predictions(report: &EvalReport, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&out.join("predictions.csv"))?);
    w.write_record([
        "patient_id",
        "truth_cancer",
        "status",
        "n_predicted",
        "n_cancer",
        "p_fp",
        "p_fn",
        "probability",
        "predicted_cancer",
    ])?;
    for p in &report.patients {
        let status = serde_json::to_value(p.status)?;
        w.write_record([
            p.patient_id.clone(),
            p.truth_cancer.to_string(),
            status.as_str().unwrap_or_default().to_string(),
            p.n_predicted.to_string(),
            p.n_cancer.to_string(),
            p.p_fp.to_string(),
            p.p_fn.to_string(),
            p.probability.map_or(String::new(), |v| v.to_string()),
            p.predicted_cancer.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&out.join("roi_predictions.csv"))?);
    w.write_record(["patient_id", "roi_id", "label", "predicted", "p_cancer", "note"])?;
    for p in &report.patients {
        for r in &p.rois {
            w.write_record([
                p.patient_id.as_str(),
                r.roi_id.as_str(),
                r.label.as_str(),
                r.predicted.map_or("", |l| l.as_str()),
                &r.p_cancer.map_or(String::new(), |v| v.to_string()),
                r.note.as_deref().unwrap_or(""),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Path, manifest: &Path) -> Result<ExitCode> {
    let (fits, load_failures) = load_and_fit(cfg, manifest)?;
    write_fits_csv(&fits, create(&out.join("fits.csv"))?)?;
    write_signatures_csv(&fits, create(&out.join("signatures.csv"))?)?;
    let report = loo_evaluate(&fits.to_signature_cohort(), &cfg.classifier)?;
    write_json(&report, &out.join("report.json"))?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table).context("writing report.txt")?;
    write_predictions(&report, out)?;
    print!("{table}");
    Ok(exit_for(load_failures + fits.n_failed()))
}

fn inspect(cfg: &RunConfig, out: &Path, roi_file: &Path) -> Result<ExitCode> {
    let series = load_series(roi_file)?;
    let outcome = process_roi(&series, &cfg.fit);
    let Some(fit) = &outcome.fit else {
        bail!("fit failed: {}", outcome.error.as_deref().unwrap_or("unknown error"));
    };
    let kernel = ResponseKernel::new(&fit.params)?;
    let duration = series.duration();
    let mut w = csv::Writer::from_writer(create(&out.join("curve.csv"))?);
    w.write_record(["t", "data", "fitted", "weight"])?;
    for (k, y) in series.intensity().iter().enumerate() {
        let t = series.time(k);
        w.write_record([
            t.to_string(),
            y.to_string(),
            kernel.eval(t).to_string(),
            weight(t, &fit.weights_used, duration)?.to_string(),
        ])?;
    }
    w.flush()?;

    let summary = json!({
        "roi": outcome.roi_id,
        "fit": fit,
        "verdict": outcome.verdict,
        "signature": outcome.signature,
        "error": outcome.error,
    });
    write_json(&summary, &out.join("inspect.json"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if outcome.signature.is_some() {
        Ok(ExitCode::SUCCESS)
    } else {
        let reasons = outcome
            .verdict
            .as_ref()
            .map(|v| v.reasons.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", "))
            .unwrap_or_default();
        eprintln!("no prediction: {}", outcome.error.as_deref().unwrap_or(&reasons));
        Ok(ExitCode::from(EXIT_NO_PREDICTION))
    }
}
