//! Synthetic cohorts with known, class-conditional model parameters.
//!
//! The default profiles follow the usual narrative: cancerous tissue retains
//! dye (slow wash-out, large `τ_i`), benign lesions perfuse slowly (large
//! `τ`), normal tissue does neither. They are test fixtures, not clinical
//! claims.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitter::FitBounds;
use crate::ingest::{
    save_manifest, save_series, CohortDataset, CohortManifest, IngestError, ManifestPatient, ManifestRoi, PatientSeries,
    RoiSeries, TissueLabel,
};
use crate::model::{response_curve, ModelError, PerfusionParams, PARAM_NAMES};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic profile: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Uniform ranges for each model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub tau: [f64; 2],
    pub damping: [f64; 2],
    pub gain: [f64; 2],
    pub tau_input: [f64; 2],
    pub delay: [f64; 2],
    pub offset: [f64; 2],
}

impl ClassProfile {
    fn ranges(&self) -> [[f64; 2]; 6] {
        [self.tau, self.damping, self.gain, self.tau_input, self.delay, self.offset]
    }

    fn with_shared(tau: [f64; 2], tau_input: [f64; 2]) -> Self {
        Self {
            tau,
            damping: [0.6, 1.8],
            gain: [60.0, 100.0],
            tau_input,
            delay: [5.0, 15.0],
            offset: [5.0, 15.0],
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> PerfusionParams {
        let x = self.ranges().map(|[lo, hi]| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        PerfusionParams::from_array(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_cancer: usize,
    pub rois_per_patient: usize,
    /// Share of each patient's regions that are suspicious (benign or cancer).
    pub suspicious_fraction: f64,
    pub sample_interval: f64,
    pub duration: f64,
    /// Gaussian noise standard deviation as a fraction of the clean peak.
    pub noise_fraction: f64,
    /// Constant dispersion channel (pixel standard deviation).
    pub pixel_dispersion: f64,
    /// Relative per-patient jitter applied to gain and offset.
    pub patient_jitter: f64,
    pub normal: ClassProfile,
    pub benign: ClassProfile,
    pub cancer: ClassProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 20,
            n_cancer: 8,
            rois_per_patient: 20,
            suspicious_fraction: 0.6,
            sample_interval: 0.1,
            duration: 300.0,
            noise_fraction: 0.02,
            pixel_dispersion: 4.0,
            patient_jitter: 0.15,
            normal: ClassProfile::with_shared([6.0, 10.0], [180.0, 260.0]),
            benign: ClassProfile::with_shared([16.0, 24.0], [180.0, 260.0]),
            cancer: ClassProfile::with_shared([6.0, 10.0], [450.0, 650.0]),
        }
    }
}

impl SynthConfig {
    /// Class ranges that overlap substantially, for graceful-degradation runs.
    pub fn overlapping() -> Self {
        Self {
            normal: ClassProfile::with_shared([6.0, 16.0], [180.0, 380.0]),
            benign: ClassProfile::with_shared([9.0, 20.0], [180.0, 380.0]),
            cancer: ClassProfile::with_shared([6.0, 16.0], [260.0, 460.0]),
            ..Self::default()
        }
    }

    pub fn profile(&self, label: TissueLabel) -> &ClassProfile {
        match label {
            TissueLabel::Normal => &self.normal,
            TissueLabel::Benign => &self.benign,
            TissueLabel::Cancer => &self.cancer,
        }
    }

    pub fn validate(&self, bounds: &FitBounds) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.n_patients == 0 || self.rois_per_patient == 0 {
            return err("need at least one patient and one region".into());
        }
        if self.n_cancer > self.n_patients {
            return err(format!("n_cancer {} exceeds n_patients {}", self.n_cancer, self.n_patients));
        }
        if !(0.0..=1.0).contains(&self.suspicious_fraction) {
            return err("suspicious_fraction must lie in [0, 1]".into());
        }
        if !(self.sample_interval > 0.0) || !(self.duration > self.sample_interval) {
            return err("need 0 < sample_interval < duration".into());
        }
        if !(self.noise_fraction >= 0.0) || !(self.pixel_dispersion >= 0.0) || !(0.0..1.0).contains(&self.patient_jitter) {
            return err("noise_fraction, pixel_dispersion must be >= 0 and patient_jitter in [0, 1)".into());
        }
        let (lo, hi) = (bounds.lower(), bounds.upper());
        for label in TissueLabel::ALL {
            for (j, [a, b]) in self.profile(label).ranges().into_iter().enumerate() {
                if !(a <= b && a >= lo[j] && b <= hi[j]) {
                    return err(format!(
                        "{label} range for {} [{a}, {b}] must be ordered and inside the fit bounds [{}, {}]",
                        PARAM_NAMES[j], lo[j], hi[j]
                    ));
                }
            }
            if self.profile(label).tau[1] >= self.profile(label).tau_input[0] {
                return err(format!("{label}: tau range must lie below tau_input range"));
            }
        }
        Ok(())
    }
}

/// Clean response plus Gaussian noise of standard deviation `noise_sigma`,
/// clamped at zero, with a constant dispersion channel.
pub fn synth_series(
    params: &PerfusionParams,
    sample_interval: f64,
    duration: f64,
    noise_sigma: f64,
    dispersion: f64,
    rng: &mut impl Rng,
) -> Result<RoiSeries, SynthError> {
    let n = (duration / sample_interval).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * sample_interval).collect();
    let mut y = response_curve(params, &times)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| SynthError::Config(e.to_string()))?;
        for v in y.iter_mut() {
            *v = (*v + normal.sample(rng)).max(0.0);
        }
    }
    Ok(RoiSeries::new(sample_interval, y, vec![dispersion; n])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub dataset: CohortDataset,
    /// Ground-truth parameters, aligned with `dataset` patients and regions.
    pub truth: Vec<Vec<PerfusionParams>>,
}

/// SplitMix64 step; decorrelates per-patient streams derived from one seed.
fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn roi_labels(cfg: &SynthConfig, cancer: bool) -> Vec<TissueLabel> {
    let n_sus = (cfg.suspicious_fraction * cfg.rois_per_patient as f64).round() as usize;
    let suspicious = if cancer { TissueLabel::Cancer } else { TissueLabel::Benign };
    (0..cfg.rois_per_patient)
        .map(|r| if r < cfg.rois_per_patient - n_sus { TissueLabel::Normal } else { suspicious })
        .collect()
}

fn pathology(labels: &[TissueLabel]) -> TissueLabel {
    labels.iter().copied().max().unwrap_or(TissueLabel::Normal)
}

pub fn generate_cohort(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCohort, SynthError> {
    cfg.validate(&FitBounds::default())?;
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let mut is_cancer = vec![false; cfg.n_patients];
    for &i in &order[..cfg.n_cancer] {
        is_cancer[i] = true;
    }

    let patients = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let gain_scale = 1.0 + cfg.patient_jitter * rng.random_range(-1.0..=1.0);
            let offset_scale = 1.0 + cfg.patient_jitter * rng.random_range(-1.0..=1.0);
            let labels = roi_labels(cfg, is_cancer[i]);
            let patient_id = format!("P{:02}", i + 1);
            let mut rois = Vec::with_capacity(labels.len());
            let mut truth = Vec::with_capacity(labels.len());
            for (r, &label) in labels.iter().enumerate() {
                let mut p = cfg.profile(label).sample(&mut rng);
                p.gain *= gain_scale;
                p.offset *= offset_scale;
                let clean_peak = p.offset + p.gain;
                let series = synth_series(
                    &p,
                    cfg.sample_interval,
                    cfg.duration,
                    cfg.noise_fraction * clean_peak,
                    cfg.pixel_dispersion,
                    &mut rng,
                )?
                .with_ids(patient_id.clone(), format!("R{:02}", r + 1))
                .with_label(Some(label));
                rois.push(series);
                truth.push(p);
            }
            Ok((
                PatientSeries {
                    patient_id,
                    pathology: pathology(&labels),
                    rois,
                },
                truth,
            ))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let (patients, truth) = patients.into_iter().unzip();
    Ok(SyntheticCohort {
        dataset: CohortDataset { patients },
        truth,
    })
}

/// Permutes pathology across patients and relabels suspicious regions to
/// match (normal regions stay normal). Features no longer carry the label.
pub fn shuffle_pathology(dataset: &CohortDataset, seed: u64) -> CohortDataset {
    let mut labels: Vec<TissueLabel> = dataset.patients.iter().map(|p| p.pathology).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let patients = dataset
        .patients
        .iter()
        .zip(labels)
        .map(|(p, pathology)| {
            let suspicious = if pathology == TissueLabel::Cancer {
                TissueLabel::Cancer
            } else {
                TissueLabel::Benign
            };
            let rois = p
                .rois
                .iter()
                .map(|r| {
                    let label = r.label.map(|l| if l.is_suspicious() { suspicious } else { l });
                    r.clone().with_label(label)
                })
                .collect();
            PatientSeries {
                patient_id: p.patient_id.clone(),
                pathology,
                rois,
            }
        })
        .collect();
    CohortDataset { patients }
}

/// Writes every series to `dir/series/` plus `dir/manifest.toml`, and the
/// ground truth to `dir/truth.csv` when given.
pub fn write_cohort(
    dataset: &CohortDataset,
    truth: Option<&[Vec<PerfusionParams>]>,
    dir: &Path,
) -> Result<CohortManifest, SynthError> {
    let io = |path: &Path, source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let series_dir = dir.join("series");
    fs::create_dir_all(&series_dir).map_err(|e| io(&series_dir, e))?;
    let mut manifest = CohortManifest {
        patients: Vec::new(),
        base_dir: dir.to_path_buf(),
    };
    for p in &dataset.patients {
        let mut rois = Vec::new();
        for r in &p.rois {
            let rel = Path::new("series").join(format!("{}_{}.csv", p.patient_id, r.roi_id));
            save_series(r, &dir.join(&rel))?;
            rois.push(ManifestRoi {
                id: r.roi_id.clone(),
                file: rel,
                label: r.label.unwrap_or(TissueLabel::Normal),
            });
        }
        manifest.patients.push(ManifestPatient {
            id: p.patient_id.clone(),
            pathology: p.pathology,
            rois,
        });
    }
    save_manifest(&manifest, &dir.join("manifest.toml"))?;

    if let Some(truth) = truth {
        let path = dir.join("truth.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| SynthError::Config(e.to_string()))?;
        let mut header = vec!["patient_id", "roi_id"];
        header.extend(PARAM_NAMES);
        w.write_record(&header).map_err(|e| SynthError::Config(e.to_string()))?;
        for (p, params) in dataset.patients.iter().zip(truth) {
            for (r, q) in p.rois.iter().zip(params) {
                let mut row = vec![p.patient_id.clone(), r.roi_id.clone()];
                row.extend(q.to_array().iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| SynthError::Config(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io(&path, e))?;
    }
    Ok(manifest)
}
