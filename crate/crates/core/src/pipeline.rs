//! Batch driver: floors dispersion, fits every region in parallel and
//! assembles signatures, merged in `(patient_id, roi_id)` order.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{PatientRecord, RoiRecord, SignatureCohort};
use crate::fitter::{fit, FitBounds, FitOptions, FitResult, WeightConfig};
use crate::ingest::{threshold_dispersion, CohortDataset, RoiSeries, TissueLabel, DEFAULT_DISPERSION_FLOOR};
use crate::model::PARAM_NAMES;
use crate::signature::{signature_from_fit, QualityRules, QualityVerdict, Signature, SignatureOutcome, FEATURE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub dispersion_floor: f64,
    pub weights: WeightConfig,
    pub bounds: FitBounds,
    pub options: FitOptions,
    pub quality: QualityRules,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            dispersion_floor: DEFAULT_DISPERSION_FLOOR,
            weights: WeightConfig::default(),
            bounds: FitBounds::default(),
            options: FitOptions::default(),
            quality: QualityRules::default(),
        }
    }
}

/// Everything learned about one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiOutcome {
    pub patient_id: String,
    pub roi_id: String,
    pub label: Option<TissueLabel>,
    pub duration: f64,
    pub sample_interval: f64,
    pub fit: Option<FitResult>,
    pub verdict: Option<QualityVerdict>,
    pub signature: Option<Signature>,
    /// Set when fitting or feature extraction failed.
    pub error: Option<String>,
}

impl RoiOutcome {
    /// Re-derives verdict and signature from the stored fit under `rules`.
    pub fn reassess(&mut self, rules: &QualityRules) {
        let Some(fit) = &self.fit else { return };
        self.verdict = None;
        self.signature = None;
        self.error = None;
        match signature_from_fit(fit, self.duration, self.sample_interval, rules) {
            Ok(SignatureOutcome::Accepted(s)) => {
                self.verdict = Some(QualityVerdict::from_reasons(Vec::new()));
                self.signature = Some(s);
            }
            Ok(SignatureOutcome::NoPrediction(v)) => self.verdict = Some(v),
            Err(e) => self.error = Some(e.to_string()),
        }
    }
}

/// FNV-1a over the region identity, so each region gets its own
/// multi-start stream independent of processing order.
fn roi_seed(seed: u64, patient_id: &str, roi_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.bytes().chain([0u8]).chain(roi_id.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed
}

pub fn process_roi(series: &RoiSeries, settings: &FitSettings) -> RoiOutcome {
    let mut out = RoiOutcome {
        patient_id: series.patient_id.clone(),
        roi_id: series.roi_id.clone(),
        label: series.label,
        duration: series.duration(),
        sample_interval: series.sample_interval(),
        fit: None,
        verdict: None,
        signature: None,
        error: None,
    };
    let floored = match threshold_dispersion(series.clone(), settings.dispersion_floor) {
        Ok(s) => s,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let opts = FitOptions {
        seed: roi_seed(settings.options.seed, &series.patient_id, &series.roi_id),
        ..settings.options
    };
    match fit(&floored, &settings.weights, &settings.bounds, &opts) {
        Ok(f) => {
            out.fit = Some(f);
            out.reassess(&settings.quality);
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFits {
    pub patient_id: String,
    pub pathology: TissueLabel,
    pub rois: Vec<RoiOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortFits {
    pub patients: Vec<PatientFits>,
}

impl CohortFits {
    pub fn rois(&self) -> impl Iterator<Item = &RoiOutcome> {
        self.patients.iter().flat_map(|p| p.rois.iter())
    }

    pub fn n_failed(&self) -> usize {
        self.rois().filter(|r| r.error.is_some()).count()
    }

    pub fn to_signature_cohort(&self) -> SignatureCohort {
        SignatureCohort {
            patients: self
                .patients
                .iter()
                .map(|p| PatientRecord {
                    patient_id: p.patient_id.clone(),
                    pathology: p.pathology,
                    rois: p
                        .rois
                        .iter()
                        .map(|r| RoiRecord {
                            roi_id: r.roi_id.clone(),
                            label: r.label,
                            l1_relative_error: r.fit.as_ref().map(|f| f.l1_relative_error),
                            signature: r.signature,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Fits every region of the cohort. Work is spread over the current rayon
/// pool; the result is ordered by patient id, then region id.
pub fn fit_cohort(dataset: &CohortDataset, settings: &FitSettings) -> CohortFits {
    let jobs: Vec<(usize, &RoiSeries)> = dataset
        .patients
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.rois.iter().map(move |r| (i, r)))
        .collect();
    let outcomes: Vec<(usize, RoiOutcome)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let mut o = process_roi(r, settings);
            o.patient_id = dataset.patients[i].patient_id.clone();
            (i, o)
        })
        .collect();
    let mut patients: Vec<PatientFits> = dataset
        .patients
        .iter()
        .map(|p| PatientFits {
            patient_id: p.patient_id.clone(),
            pathology: p.pathology,
            rois: Vec::new(),
        })
        .collect();
    for (i, o) in outcomes {
        patients[i].rois.push(o);
    }
    for p in patients.iter_mut() {
        p.rois.sort_by(|a, b| a.roi_id.cmp(&b.roi_id));
    }
    patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    CohortFits { patients }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn label_str(l: Option<TissueLabel>) -> &'static str {
    l.map_or("", |l| l.as_str())
}

fn reasons_str(v: &Option<QualityVerdict>) -> String {
    v.as_ref()
        .map(|v| v.reasons.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

/// One row per region: fit parameters, diagnostics and quality verdict.
pub fn write_fits_csv<W: Write>(fits: &CohortFits, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id", "roi_id", "label", "converged", "n_iterations", "objective", "l1_relative_error"];
    header.extend(PARAM_NAMES);
    header.extend(["accepted", "reasons", "error"]);
    w.write_record(&header)?;
    for r in fits.rois() {
        let mut row = vec![r.patient_id.clone(), r.roi_id.clone(), label_str(r.label).to_string()];
        match &r.fit {
            Some(f) => {
                row.push(f.converged.to_string());
                row.push(f.n_iterations.to_string());
                row.push(f.objective_value.to_string());
                row.push(f.l1_relative_error.to_string());
                row.extend(f.params.to_array().iter().map(|v| v.to_string()));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 4 + PARAM_NAMES.len())),
        }
        row.push(r.signature.is_some().to_string());
        row.push(reasons_str(&r.verdict));
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per region: the twelve features (empty when not accepted).
pub fn write_signatures_csv<W: Write>(fits: &CohortFits, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id", "roi_id", "label", "accepted"];
    header.extend(FEATURE_NAMES);
    header.push("reasons");
    w.write_record(&header)?;
    for r in fits.rois() {
        let mut row = vec![
            r.patient_id.clone(),
            r.roi_id.clone(),
            label_str(r.label).to_string(),
            r.signature.is_some().to_string(),
        ];
        match &r.signature {
            Some(s) => row.extend(s.to_array().iter().map(|v| fmt_opt(Some(*v)))),
            None => row.extend(std::iter::repeat_n(String::new(), 12)),
        }
        row.push(reasons_str(&r.verdict));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
