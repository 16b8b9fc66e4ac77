//! Cohort manifests (TOML, one `[[patient]]` table per patient) and the
//! in-memory cohort of loaded series.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_series, IngestError, RoiSeries, TissueLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRoi {
    pub id: String,
    /// Path to the series file, relative to the manifest's directory.
    pub file: PathBuf,
    pub label: TissueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub pathology: TissueLabel,
    #[serde(default, rename = "roi")]
    pub rois: Vec<ManifestRoi>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortManifest {
    #[serde(default, rename = "patient")]
    pub patients: Vec<ManifestPatient>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn resolve(&self, roi: &ManifestRoi) -> PathBuf {
        self.base_dir.join(&roi.file)
    }

    pub fn n_rois(&self) -> usize {
        self.patients.iter().map(|p| p.rois.len()).sum()
    }

    fn validate(&self) -> Result<(), IngestError> {
        let mut ids = HashSet::new();
        for p in &self.patients {
            if !ids.insert(p.id.as_str()) {
                return Err(IngestError::Manifest(format!("duplicate patient id '{}'", p.id)));
            }
            let mut roi_ids = HashSet::new();
            for r in &p.rois {
                if !roi_ids.insert(r.id.as_str()) {
                    return Err(IngestError::Manifest(format!(
                        "duplicate roi id '{}' for patient '{}'",
                        r.id, p.id
                    )));
                }
                let path = self.resolve(r);
                if !path.is_file() {
                    return Err(IngestError::Manifest(format!(
                        "patient '{}' roi '{}': file {} does not exist",
                        p.id,
                        r.id,
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<CohortManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut manifest: CohortManifest =
        toml::from_str(&text).map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &CohortManifest, path: &Path) -> Result<(), IngestError> {
    let text = toml::to_string(manifest).map_err(|e| IngestError::Manifest(e.to_string()))?;
    fs::write(path, text).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSeries {
    pub patient_id: String,
    pub pathology: TissueLabel,
    pub rois: Vec<RoiSeries>,
}

/// Patients with their region series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortDataset {
    pub patients: Vec<PatientSeries>,
}

impl CohortDataset {
    pub fn n_rois(&self) -> usize {
        self.patients.iter().map(|p| p.rois.len()).sum()
    }

    pub fn rois(&self) -> impl Iterator<Item = &RoiSeries> {
        self.patients.iter().flat_map(|p| p.rois.iter())
    }
}

/// A region whose series file could not be read.
#[derive(Debug)]
pub struct LoadFailure {
    pub patient_id: String,
    pub roi_id: String,
    pub error: IngestError,
}

/// Loads every series of the manifest. Unreadable files are reported and
/// skipped; the remaining regions are still returned.
pub fn load_cohort(manifest: &CohortManifest) -> (CohortDataset, Vec<LoadFailure>) {
    let mut failures = Vec::new();
    let patients = manifest
        .patients
        .iter()
        .map(|p| {
            let rois = p
                .rois
                .iter()
                .filter_map(|r| match load_series(&manifest.resolve(r)) {
                    Ok(s) => Some(s.with_ids(p.id.clone(), r.id.clone()).with_label(Some(r.label))),
                    Err(error) => {
                        failures.push(LoadFailure {
                            patient_id: p.id.clone(),
                            roi_id: r.id.clone(),
                            error,
                        });
                        None
                    }
                })
                .collect();
            PatientSeries {
                patient_id: p.id.clone(),
                pathology: p.pathology,
                rois,
            }
        })
        .collect();
    (CohortDataset { patients }, failures)
}
