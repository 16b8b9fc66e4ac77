//! Cohort-level records, leave-one-patient-out evaluation and reporting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_case, predict, train, AggregationMode, CaseAggregationConfig, ClassifierConfig, ClassifierModel,
    ClassifyError, LabeledRow, NormalizedSignature, Scheme,
};
use crate::classify::gbdt::GbdtParams;
use crate::classify::normalize;
use crate::ingest::TissueLabel;
use crate::signature::Signature;

/// One region after fitting: `signature` is `None` when the region carries
/// no prediction (rejected or failed fit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub roi_id: String,
    pub label: Option<TissueLabel>,
    pub l1_relative_error: Option<f64>,
    pub signature: Option<Signature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub pathology: TissueLabel,
    pub rois: Vec<RoiRecord>,
}

impl PatientRecord {
    pub fn is_cancer(&self) -> bool {
        self.pathology == TissueLabel::Cancer
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignatureCohort {
    pub patients: Vec<PatientRecord>,
}

/// A patient's regions normalized against its healthy reference.
#[derive(Debug, Clone)]
pub(super) struct PreparedPatient {
    pub patient_id: String,
    pub is_cancer: bool,
    pub reference_id: Option<String>,
    /// `(roi_id, label, normalized features or the reason there are none)`
    pub rows: Vec<(String, TissueLabel, Result<NormalizedSignature, String>)>,
}

impl PreparedPatient {
    fn training_rows(&self) -> impl Iterator<Item = LabeledRow> + '_ {
        self.rows.iter().filter_map(|(_, label, f)| {
            f.as_ref().ok().map(|features| LabeledRow {
                features: *features,
                label: *label,
            })
        })
    }
}

/// The reference is the accepted normal region with the lowest L1 error;
/// it defines the origin and is not classified itself.
pub(super) fn prepare(patient: &PatientRecord, cfg: &ClassifierConfig) -> PreparedPatient {
    let reference = patient
        .rois
        .iter()
        .filter(|r| r.label == Some(TissueLabel::Normal) && r.signature.is_some())
        .min_by(|a, b| {
            let la = a.l1_relative_error.unwrap_or(f64::INFINITY);
            let lb = b.l1_relative_error.unwrap_or(f64::INFINITY);
            la.total_cmp(&lb).then_with(|| a.roi_id.cmp(&b.roi_id))
        });
    let mut rows = Vec::new();
    for r in &patient.rois {
        let Some(label) = r.label else { continue };
        if reference.is_some_and(|rf| rf.roi_id == r.roi_id) {
            continue;
        }
        let features = match (&r.signature, reference) {
            (None, _) => Err("no signature".to_string()),
            (Some(_), None) => Err("no healthy reference".to_string()),
            (Some(sig), Some(rf)) => {
                normalize(sig, rf.signature.as_ref().expect("filtered"), &cfg.normalization).map_err(|e| e.to_string())
            }
        };
        rows.push((r.roi_id.clone(), label, features));
    }
    PreparedPatient {
        patient_id: patient.patient_id.clone(),
        is_cancer: patient.is_cancer(),
        reference_id: reference.map(|r| r.roi_id.clone()),
        rows,
    }
}

pub(super) fn prepare_all(cohort: &SignatureCohort, cfg: &ClassifierConfig) -> Vec<PreparedPatient> {
    cohort.patients.iter().map(|p| prepare(p, cfg)).collect()
}

fn train_on(patients: &[&PreparedPatient], cfg: &ClassifierConfig) -> Result<ClassifierModel, ClassifyError> {
    let rows: Vec<LabeledRow> = patients.iter().flat_map(|p| p.training_rows()).collect();
    train(&rows, cfg.scheme, &cfg.gbdt, &cfg.normalization)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPrediction {
    pub roi_id: String,
    pub label: TissueLabel,
    pub predicted: Option<TissueLabel>,
    pub p_cancer: Option<f64>,
    /// Why no prediction was made, when `predicted` is `None`.
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientStatus {
    Predicted,
    NoReference,
    NoPredictedRois,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub truth_cancer: bool,
    pub reference_id: Option<String>,
    pub status: PatientStatus,
    pub n_predicted: usize,
    pub n_cancer: usize,
    pub p_fp: f64,
    pub p_fn: f64,
    pub probability: Option<f64>,
    /// Case decision; a case without prediction counts as negative.
    pub predicted_cancer: bool,
    pub rois: Vec<RoiPrediction>,
}

fn predict_patient(
    model: &ClassifierModel,
    patient: &PreparedPatient,
    rates: CaseAggregationConfig,
    threshold: f64,
) -> Result<PatientPrediction, ClassifyError> {
    let mut rois = Vec::new();
    for (roi_id, label, features) in &patient.rows {
        if !model.scheme.includes(*label) {
            continue;
        }
        let (predicted, p_cancer, note) = match features {
            Ok(f) => {
                let p = predict(model, f)?;
                (Some(p.argmax()), Some(p.get(TissueLabel::Cancer)), None)
            }
            Err(reason) => (None, None, Some(reason.clone())),
        };
        rois.push(RoiPrediction {
            roi_id: roi_id.clone(),
            label: *label,
            predicted,
            p_cancer,
            note,
        });
    }
    let n = rois.iter().filter(|r| r.predicted.is_some()).count();
    let c = rois.iter().filter(|r| r.predicted == Some(TissueLabel::Cancer)).count();
    let (status, probability) = if patient.reference_id.is_none() {
        (PatientStatus::NoReference, None)
    } else if n == 0 {
        (PatientStatus::NoPredictedRois, None)
    } else {
        (PatientStatus::Predicted, Some(aggregate_case(n, c, &rates)?))
    };
    Ok(PatientPrediction {
        patient_id: patient.patient_id.clone(),
        truth_cancer: patient.is_cancer,
        reference_id: patient.reference_id.clone(),
        status,
        n_predicted: n,
        n_cancer: c,
        p_fp: rates.p_fp,
        p_fn: rates.p_fn,
        probability,
        predicted_cancer: probability.is_some_and(|p| p >= threshold),
        rois,
    })
}

/// Region-level false positive and false negative rates (cancer = positive)
/// from leave-one-patient-out over `patients`.
fn estimate_rates(patients: &[&PreparedPatient], cfg: &ClassifierConfig) -> CaseAggregationConfig {
    let mut c = Confusion::default();
    for (k, held_out) in patients.iter().enumerate() {
        let rest: Vec<&PreparedPatient> = patients
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, p)| *p)
            .collect();
        let Ok(model) = train_on(&rest, cfg) else { continue };
        for (_, label, features) in &held_out.rows {
            let Ok(f) = features else { continue };
            if !cfg.scheme.includes(*label) {
                continue;
            }
            let Ok(p) = predict(&model, f) else { continue };
            c.add(*label == TissueLabel::Cancer, p.argmax() == TissueLabel::Cancer);
        }
    }
    CaseAggregationConfig {
        p_fp: ratio(c.fp, c.fp + c.tn).unwrap_or(0.0),
        p_fn: ratio(c.fn_, c.fn_ + c.tp).unwrap_or(0.0),
    }
}

fn rates_for(patients: &[&PreparedPatient], cfg: &ClassifierConfig) -> CaseAggregationConfig {
    match cfg.aggregation {
        AggregationMode::Fixed(r) => r,
        AggregationMode::InnerLoo => estimate_rates(patients, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: Scheme,
    pub roi_correct: usize,
    pub roi_total: usize,
    pub roi_accuracy: Option<f64>,
    pub case_accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: Confusion,
    pub patients: Vec<PatientPrediction>,
}

impl EvalReport {
    /// Derives every metric from the per-patient predictions.
    pub fn from_predictions(scheme: Scheme, patients: Vec<PatientPrediction>) -> Self {
        let mut confusion = Confusion::default();
        let (mut roi_correct, mut roi_total) = (0, 0);
        for p in &patients {
            confusion.add(p.truth_cancer, p.predicted_cancer);
            for r in &p.rois {
                if let Some(pred) = r.predicted {
                    roi_total += 1;
                    roi_correct += (pred == r.label) as usize;
                }
            }
        }
        Self {
            scheme,
            roi_correct,
            roi_total,
            roi_accuracy: ratio(roi_correct, roi_total),
            case_accuracy: ratio(confusion.tp + confusion.tn, confusion.total()).unwrap_or(0.0),
            sensitivity: ratio(confusion.tp, confusion.tp + confusion.fn_),
            specificity: ratio(confusion.tn, confusion.tn + confusion.fp),
            confusion,
            patients,
        }
    }

    /// Fixed-width summary table.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>14} {:>14} {:>12} {:>12}\n",
            "scheme", "roi_accuracy", "case_accuracy", "sensitivity", "specificity"
        ));
        s.push_str(&format!(
            "{:<12} {:>14} {:>14} {:>12} {:>12}\n",
            match self.scheme {
                Scheme::TwoClass => "two_class",
                Scheme::ThreeClass => "three_class",
            },
            pct(self.roi_accuracy),
            pct(Some(self.case_accuracy)),
            pct(self.sensitivity),
            pct(self.specificity)
        ));
        let c = &self.confusion;
        s.push_str(&format!(
            "\ncases: tp={} fp={} tn={} fn={}; rois: {}/{} correct\n",
            c.tp, c.fp, c.tn, c.fn_, self.roi_correct, self.roi_total
        ));
        s
    }
}

/// Leave-one-patient-out: each patient is predicted by a model trained on
/// all other patients, with case-aggregation rates estimated on those same
/// training patients only.
pub fn loo_evaluate(cohort: &SignatureCohort, cfg: &ClassifierConfig) -> Result<EvalReport, ClassifyError> {
    cfg.validate()?;
    let n = cohort.patients.len();
    if n < 3 {
        return Err(ClassifyError::Insufficient(format!("at least 3 patients, got {n}")));
    }
    let n_cancer = cohort.patients.iter().filter(|p| p.is_cancer()).count();
    if n_cancer == 0 || n_cancer == n {
        return Err(ClassifyError::Insufficient("both cancer and non-cancer patients".into()));
    }
    let prepared = prepare_all(cohort, cfg);
    let predictions = (0..n)
        .into_par_iter()
        .map(|i| {
            let train_set: Vec<&PreparedPatient> = prepared
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| p)
                .collect();
            let model = train_on(&train_set, cfg)?;
            let rates = rates_for(&train_set, cfg);
            predict_patient(&model, &prepared[i], rates, cfg.decision_threshold)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_predictions(cfg.scheme, predictions))
}

/// Trains one model on every patient of the cohort.
pub fn train_cohort(cohort: &SignatureCohort, cfg: &ClassifierConfig) -> Result<ClassifierModel, ClassifyError> {
    cfg.validate()?;
    let prepared = prepare_all(cohort, cfg);
    let all: Vec<&PreparedPatient> = prepared.iter().collect();
    train_on(&all, cfg)
}

/// Evaluates every hyper-parameter set by leave-one-patient-out and returns
/// them best first (case accuracy, then ROI accuracy; ties keep grid order).
pub fn grid_search(
    cohort: &SignatureCohort,
    cfg: &ClassifierConfig,
    grid: &[GbdtParams],
) -> Result<Vec<(GbdtParams, EvalReport)>, ClassifyError> {
    let mut results = grid
        .iter()
        .map(|g| {
            let c = ClassifierConfig {
                gbdt: *g,
                ..cfg.clone()
            };
            loo_evaluate(cohort, &c).map(|r| (*g, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| {
        b.1.case_accuracy
            .total_cmp(&a.1.case_accuracy)
            .then(b.1.roi_accuracy.unwrap_or(0.0).total_cmp(&a.1.roi_accuracy.unwrap_or(0.0)))
    });
    Ok(results)
}
