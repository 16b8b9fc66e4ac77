//! Run configuration (TOML). Every section is optional and falls back to the
//! documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::ClassifierConfig;
use crate::pipeline::FitSettings;
use crate::synth::SynthConfig;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed: fit multi-starts and synthetic cohorts derive from it.
    pub seed: u64,
    /// Worker threads; `None` uses all available cores.
    pub jobs: Option<usize>,
    pub fit: FitSettings,
    pub classifier: ClassifierConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let f = &self.fit;
        if !(f.dispersion_floor > 0.0) {
            return Err(Error::Config("fit.dispersion_floor must be > 0".into()));
        }
        f.weights.validate()?;
        f.bounds.validate()?;
        if f.options.starts == 0 || f.options.max_iterations == 0 {
            return Err(Error::Config("fit.options: starts and max_iterations must be positive".into()));
        }
        let q = &f.quality;
        if !(q.damping_range[0] < q.damping_range[1]) || !(q.max_l1 > 0.0) || !(q.max_tau > 0.0) {
            return Err(Error::Config("fit.quality: invalid thresholds".into()));
        }
        self.classifier.validate()?;
        self.synth.validate(&f.bounds)?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}
