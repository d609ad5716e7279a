use std::path::Path;

use advage_core::adversary::ModelConfig;
use advage_core::eval_stats::{Dispersion, ProbeConfig};
use advage_core::ingest::FilterParams;
use advage_core::synth::SynthConfig;
use advage_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 2] = [
    ("paper-defaults", include_str!("../configs/paper-defaults.toml")),
    ("paper-intervention", include_str!("../configs/paper-intervention.toml")),
];

/// Everything a command may need; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub filter: FilterParams,
    pub alpha_grid: Vec<f64>,
    pub dispersion: Dispersion,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            filter: FilterParams::default(),
            alpha_grid: vec![0.0, 0.5, 1.0, 5.0, 20.0, 50.0],
            dispersion: Dispersion::Population,
            probe: ProbeConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// A preset name, a `.json` file, or a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some((_, text)) = PRESETS.iter().find(|(name, _)| *name == spec) {
            return Self::from_toml(text);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.alpha_grid.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("alpha_grid entries must be nonnegative".into()));
        }
        Ok(())
    }
}
