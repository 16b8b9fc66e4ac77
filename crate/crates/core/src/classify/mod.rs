//! Healthy-reference normalization, gradient-boosted ROI classification and
//! patient-level (case) aggregation.

mod eval;
pub mod gbdt;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TissueLabel;
use crate::signature::{Signature, FEATURE_NAMES};
pub use eval::{
    grid_search, loo_evaluate, train_cohort, Confusion, EvalReport, PatientPrediction, PatientRecord, PatientStatus,
    RoiPrediction, RoiRecord, SignatureCohort,
};
use gbdt::{Gbdt, GbdtParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("reference value of feature '{0}' is zero; cannot normalize as a ratio")]
    Normalization(&'static str),
    #[error("training set needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("training set is empty")]
    EmptyTraining,
    #[error("feature vector has non-finite entry '{0}'")]
    NonFinite(&'static str),
    #[error("case has no predicted regions")]
    NoPredictionForCase,
    #[error("evaluation needs {0}")]
    Insufficient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
}

/// How a feature is compared with the healthy reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureClass {
    /// `value / reference`
    Ratio,
    /// `value - reference`
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationScheme {
    /// One entry per signature feature, in signature order.
    pub classes: [FeatureClass; 12],
}

impl Default for NormalizationScheme {
    /// Times are differences; rates, slope and real amplitudes are ratios.
    /// The two imaginary parts are differences: they are exactly zero for
    /// every non-oscillating reference, so a ratio would be undefined.
    fn default() -> Self {
        use FeatureClass::{Difference as D, Ratio as R};
        Self {
            classes: [D, D, D, R, R, R, R, D, R, R, R, D],
        }
    }
}

impl NormalizationScheme {
    /// The same scheme with every amplitude and imaginary feature a ratio.
    pub fn all_ratio_amplitudes() -> Self {
        let mut s = Self::default();
        s.classes[7] = FeatureClass::Ratio;
        s.classes[11] = FeatureClass::Ratio;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSignature {
    pub features: [f64; 12],
}

pub fn normalize(
    sig: &Signature,
    reference: &Signature,
    scheme: &NormalizationScheme,
) -> Result<NormalizedSignature, ClassifyError> {
    let (v, r) = (sig.to_array(), reference.to_array());
    let mut features = [0.0; 12];
    for j in 0..12 {
        features[j] = match scheme.classes[j] {
            FeatureClass::Difference => v[j] - r[j],
            FeatureClass::Ratio => {
                if r[j] == 0.0 {
                    return Err(ClassifyError::Normalization(FEATURE_NAMES[j]));
                }
                v[j] / r[j]
            }
        };
    }
    Ok(NormalizedSignature { features })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Suspicious regions only, benign vs cancer.
    TwoClass,
    /// Normal, benign and cancer.
    ThreeClass,
}

impl Scheme {
    pub fn classes(self) -> &'static [TissueLabel] {
        match self {
            Scheme::TwoClass => &[TissueLabel::Benign, TissueLabel::Cancer],
            Scheme::ThreeClass => &TissueLabel::ALL,
        }
    }

    /// Whether regions with this label take part in the scheme.
    pub fn includes(self, label: TissueLabel) -> bool {
        self.classes().contains(&label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseAggregationConfig {
    pub p_fp: f64,
    pub p_fn: f64,
}

impl Default for CaseAggregationConfig {
    fn default() -> Self {
        Self { p_fp: 0.0, p_fn: 0.0 }
    }
}

/// Probability that a case is cancerous given `c` of its `n` predicted
/// regions were classified as cancer.
pub fn aggregate_case(n: usize, c: usize, cfg: &CaseAggregationConfig) -> Result<f64, ClassifyError> {
    if n == 0 {
        return Err(ClassifyError::NoPredictionForCase);
    }
    assert!(c <= n, "c = {c} exceeds n = {n}");
    let (n, c) = (n as f64, c as f64);
    Ok(c / n * (1.0 - cfg.p_fp) + (n - c) / n * cfg.p_fn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationMode {
    Fixed(CaseAggregationConfig),
    /// Estimate region-level false positive/negative rates by an inner
    /// leave-one-patient-out pass over the training patients.
    InnerLoo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub scheme: Scheme,
    pub gbdt: GbdtParams,
    pub normalization: NormalizationScheme,
    pub aggregation: AggregationMode,
    pub decision_threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::TwoClass,
            gbdt: GbdtParams::default(),
            normalization: NormalizationScheme::default(),
            aggregation: AggregationMode::InnerLoo,
            decision_threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        self.gbdt.validate().map_err(ClassifyError::Config)?;
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(ClassifyError::Config("decision_threshold must lie in [0, 1]".into()));
        }
        if let AggregationMode::Fixed(c) = self.aggregation {
            if !(0.0..=1.0).contains(&c.p_fp) || !(0.0..=1.0).contains(&c.p_fn) {
                return Err(ClassifyError::Config("p_fp and p_fn must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// One normalized region with its annotation, ready for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub features: NormalizedSignature,
    pub label: TissueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub classes: Vec<TissueLabel>,
    pub probabilities: Vec<f64>,
}

impl ClassProbabilities {
    pub fn argmax(&self) -> TissueLabel {
        let best = (0..self.classes.len())
            .max_by(|&a, &b| self.probabilities[a].total_cmp(&self.probabilities[b]).then(b.cmp(&a)))
            .expect("at least two classes");
        self.classes[best]
    }

    pub fn get(&self, label: TissueLabel) -> f64 {
        self.classes
            .iter()
            .position(|&c| c == label)
            .map_or(0.0, |i| self.probabilities[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub version: u32,
    pub scheme: Scheme,
    pub classes: Vec<TissueLabel>,
    pub params: GbdtParams,
    pub normalization: NormalizationScheme,
    pub feature_names: Vec<String>,
    pub ensemble: Gbdt,
}

/// Trains on the rows belonging to `scheme`; rows of other labels are
/// ignored. Rows are put in a canonical order first, so the model does not
/// depend on input order.
pub fn train(
    rows: &[LabeledRow],
    scheme: Scheme,
    params: &GbdtParams,
    normalization: &NormalizationScheme,
) -> Result<ClassifierModel, ClassifyError> {
    params.validate().map_err(ClassifyError::Config)?;
    let mut used: Vec<&LabeledRow> = rows.iter().filter(|r| scheme.includes(r.label)).collect();
    if used.is_empty() {
        return Err(ClassifyError::EmptyTraining);
    }
    for r in &used {
        check_finite(&r.features)?;
    }
    used.sort_by(|a, b| {
        a.label.cmp(&b.label).then_with(|| {
            a.features
                .features
                .iter()
                .zip(&b.features.features)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let present: Vec<TissueLabel> = scheme
        .classes()
        .iter()
        .copied()
        .filter(|c| used.iter().any(|r| r.label == *c))
        .collect();
    if present.len() < 2 {
        return Err(ClassifyError::SingleClass(present.len()));
    }
    let x: Vec<Vec<f64>> = used.iter().map(|r| r.features.features.to_vec()).collect();
    let y: Vec<usize> = used
        .iter()
        .map(|r| present.iter().position(|&c| c == r.label).expect("label present"))
        .collect();
    let ensemble = Gbdt::fit(&x, &y, present.len(), params);
    Ok(ClassifierModel {
        version: MODEL_FORMAT_VERSION,
        scheme,
        classes: present,
        params: *params,
        normalization: *normalization,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        ensemble,
    })
}

fn check_finite(sig: &NormalizedSignature) -> Result<(), ClassifyError> {
    match sig.features.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(ClassifyError::NonFinite(FEATURE_NAMES[j])),
        None => Ok(()),
    }
}

pub fn predict(model: &ClassifierModel, sig: &NormalizedSignature) -> Result<ClassProbabilities, ClassifyError> {
    check_finite(sig)?;
    Ok(ClassProbabilities {
        classes: model.classes.clone(),
        probabilities: model.ensemble.predict_proba(&sig.features),
    })
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<(), ClassifyError> {
    let err = |message: String| ClassifyError::ModelFile {
        path: path.display().to_string(),
        message,
    };
    let text = serde_json::to_string_pretty(model).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| err(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<ClassifierModel, ClassifyError> {
    let err = |message: String| ClassifyError::ModelFile {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let model: ClassifierModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if model.version != MODEL_FORMAT_VERSION {
        return Err(err(format!("unsupported model version {}", model.version)));
    }
    Ok(model)
}
