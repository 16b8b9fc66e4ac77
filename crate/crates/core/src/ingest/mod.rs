//! Region-of-interest intensity series: construction, pixel aggregation,
//! dispersion flooring, file I/O and cohort manifests.

mod io;
mod manifest;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_series, parse_series, save_series, write_series};
pub use manifest::{
    load_cohort, load_manifest, save_manifest, CohortDataset, CohortManifest, LoadFailure,
    ManifestPatient, ManifestRoi, PatientSeries,
};

/// Default floor applied to per-sample dispersion before weighting.
pub const DEFAULT_DISPERSION_FLOOR: f64 = 1.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Tissue class of a region (surgeon annotation) or a patient (pathology).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueLabel {
    Normal,
    Benign,
    Cancer,
}

impl TissueLabel {
    pub const ALL: [TissueLabel; 3] = [TissueLabel::Normal, TissueLabel::Benign, TissueLabel::Cancer];

    pub fn as_str(self) -> &'static str {
        match self {
            TissueLabel::Normal => "normal",
            TissueLabel::Benign => "benign",
            TissueLabel::Cancer => "cancer",
        }
    }

    /// Benign and cancerous regions are "suspicious".
    pub fn is_suspicious(self) -> bool {
        self != TissueLabel::Normal
    }
}

impl fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TissueLabel {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(TissueLabel::Normal),
            "benign" => Ok(TissueLabel::Benign),
            "cancer" => Ok(TissueLabel::Cancer),
            other => Err(IngestError::InvalidInput(format!("unknown tissue label '{other}'"))),
        }
    }
}

/// Mean intensity and pixel dispersion of one region, sampled at a fixed step
/// starting from `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSeries {
    pub patient_id: String,
    pub roi_id: String,
    sample_interval_s: f64,
    intensity: Vec<f64>,
    dispersion: Vec<f64>,
    pub label: Option<TissueLabel>,
}

impl RoiSeries {
    pub fn new(
        sample_interval_s: f64,
        intensity: Vec<f64>,
        dispersion: Vec<f64>,
    ) -> Result<Self, IngestError> {
        if !(sample_interval_s > 0.0) || !sample_interval_s.is_finite() {
            return Err(IngestError::InvalidInput(format!(
                "sample interval {sample_interval_s} must be finite and > 0"
            )));
        }
        if intensity.len() != dispersion.len() {
            return Err(IngestError::InvalidInput(format!(
                "intensity ({}) and dispersion ({}) lengths differ",
                intensity.len(),
                dispersion.len()
            )));
        }
        if intensity.len() < 2 {
            return Err(IngestError::InvalidInput("series needs at least 2 samples".into()));
        }
        if let Some(k) = intensity.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(IngestError::InvalidInput(format!(
                "intensity[{k}] = {} must be finite and >= 0",
                intensity[k]
            )));
        }
        if let Some(k) = dispersion.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(IngestError::InvalidInput(format!(
                "dispersion[{k}] = {} must be finite and >= 0",
                dispersion[k]
            )));
        }
        Ok(Self {
            patient_id: String::new(),
            roi_id: String::new(),
            sample_interval_s,
            intensity,
            dispersion,
            label: None,
        })
    }

    pub fn with_ids(mut self, patient_id: impl Into<String>, roi_id: impl Into<String>) -> Self {
        self.patient_id = patient_id.into();
        self.roi_id = roi_id.into();
        self
    }

    pub fn with_label(mut self, label: Option<TissueLabel>) -> Self {
        self.label = label;
        self
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval_s
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn dispersion(&self) -> &[f64] {
        &self.dispersion
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    /// Time of sample `k` in seconds.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.sample_interval_s
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.time(k))
    }

    /// `T = (len - 1) · δ_t`.
    pub fn duration(&self) -> f64 {
        self.time(self.len() - 1)
    }
}

/// Per-frame pixel brightness of one region, shape `(frames, rows, cols)`.
#[derive(Debug, Clone)]
pub struct PixelBlock {
    frames: Array3<f64>,
    timestamps: Vec<f64>,
}

impl PixelBlock {
    pub fn new(frames: Array3<f64>, timestamps: Vec<f64>) -> Result<Self, IngestError> {
        let (n, rows, cols) = frames.dim();
        if n == 0 || rows == 0 || cols == 0 {
            return Err(IngestError::InvalidInput(format!(
                "pixel block must be non-empty, got {n}x{rows}x{cols}"
            )));
        }
        if timestamps.len() != n {
            return Err(IngestError::InvalidInput(format!(
                "{} timestamps for {n} frames",
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(IngestError::InvalidInput("timestamps must be strictly increasing".into()));
        }
        Ok(Self { frames, timestamps })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }
}

/// Collapses each frame to its mean brightness and population standard
/// deviation (single-pass Welford accumulation).
pub fn aggregate_pixels(block: &PixelBlock) -> Result<RoiSeries, IngestError> {
    let ts = &block.timestamps;
    if ts.len() < 2 {
        return Err(IngestError::InvalidInput("need at least 2 frames".into()));
    }
    let step = ts[1] - ts[0];
    for (k, &t) in ts.iter().enumerate() {
        let expected = ts[0] + k as f64 * step;
        if (t - expected).abs() > 1e-6 * expected.abs().max(step) {
            return Err(IngestError::InvalidInput(format!(
                "frame {k} at t = {t} breaks the fixed step {step}"
            )));
        }
    }

    let mut intensity = Vec::with_capacity(ts.len());
    let mut dispersion = Vec::with_capacity(ts.len());
    for frame in block.frames.axis_iter(Axis(0)) {
        let (mut count, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for &v in frame.iter() {
            if !v.is_finite() {
                return Err(IngestError::InvalidInput(format!("non-finite pixel value {v}")));
            }
            count += 1.0;
            let delta = v - mean;
            mean += delta / count;
            m2 += delta * (v - mean);
        }
        intensity.push(mean);
        dispersion.push((m2 / count).max(0.0).sqrt());
    }
    RoiSeries::new(step, intensity, dispersion)
}

/// Clamps every dispersion sample to at least `floor`.
pub fn threshold_dispersion(mut series: RoiSeries, floor: f64) -> Result<RoiSeries, IngestError> {
    if !(floor > 0.0) || !floor.is_finite() {
        return Err(IngestError::InvalidInput(format!("dispersion floor {floor} must be > 0")));
    }
    for s in &mut series.dispersion {
        *s = s.max(floor);
    }
    Ok(series)
}
