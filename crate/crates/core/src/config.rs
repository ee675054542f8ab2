//! Run configuration files: one TOML document holding the simulation
//! recipe, the reconstruction settings, an optional seed override and an
//! output directory.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};
use crate::reconstruct::ReconstructionConfig;
use crate::simulator::SimulationRecipe;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both the recipe and the reconstruction seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationRecipe>,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PtychoError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pushes the top-level seed down into the sections.
    pub fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            if let Some(sim) = &mut self.simulation {
                sim.seed = seed;
            }
            self.reconstruction.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        self.reconstruction.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PtychoError::Config(e.to_string()))
    }
}
