//! Perfusion quantification from fluorescence intensity time-series.
//!
//! The crate fits a second-order bio-physical response to per-region
//! intensity curves, derives a twelve-feature signature (three-exponential
//! modal features plus time-to-peak features), and classifies regions and
//! patients with gradient-boosted trees under leave-one-patient-out
//! evaluation. A synthetic cohort generator makes the whole pipeline
//! testable without clinical data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod config;
pub mod fitter;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod signature;
pub mod synth;

pub use classify::{aggregate_case, loo_evaluate, ClassifierConfig, EvalReport, Scheme, SignatureCohort};
pub use config::RunConfig;
pub use fitter::{fit, FitBounds, FitError, FitOptions, FitResult, WeightConfig};
pub use ingest::{CohortDataset, IngestError, RoiSeries, TissueLabel};
pub use model::{decompose, response, ModalDecomposition, ModelError, PerfusionParams, ResponseKernel};
pub use pipeline::{fit_cohort, CohortFits, FitSettings};
pub use signature::{build_signature, FeatureError, QualityRules, QualityVerdict, Signature, SignatureOutcome};
pub use synth::{generate_cohort, SynthConfig};

/// Any error raised by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] classify::ClassifyError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("configuration: {0}")]
    Config(String),
}
