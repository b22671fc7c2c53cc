//! Experiment configuration as a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diversity::DiversityQuery;
use crate::engine::{EngineConfig, Mode, MomentumSetting, TemaInit};
use crate::error::{Error, Result};
use crate::harness::{replicate_seed, Sampler, ScenarioSpec, WorldSpec};
use crate::momentum::{MomentumConfig, DEFAULT_SOURCE_BATCH};
use crate::rectifier::RectifierParams;

/// Engine settings shared by every mode of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSettings {
    pub momentum: MomentumSetting,
    pub source_batch: u64,
    pub momentum_search: MomentumConfig,
    pub rectifier: RectifierParams,
    pub init: TemaInit,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            momentum: MomentumSetting::Auto,
            source_batch: DEFAULT_SOURCE_BATCH,
            momentum_search: MomentumConfig::default(),
            rectifier: RectifierParams::default(),
            init: TemaInit::Source,
        }
    }
}

impl EngineSettings {
    pub fn for_mode(&self, mode: Mode) -> EngineConfig {
        EngineConfig {
            mode,
            momentum: self.momentum,
            source_batch: self.source_batch,
            momentum_search: self.momentum_search.clone(),
            rectifier: self.rectifier,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversitySettings {
    pub classes: u64,
    pub batch_sizes: Vec<u64>,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        Self {
            classes: 10,
            batch_sizes: vec![1, 2, 4, 16, 64, 128, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Top-level seed; every replicate and component seed derives from it.
    pub seed: u64,
    pub replicates: u64,
    pub out_dir: PathBuf,
    pub modes: Vec<Mode>,
    pub batch_sizes: Vec<usize>,
    pub sampler: Sampler,
    /// Record per-batch estimation error of the target statistics.
    pub track_estimation: bool,
    pub world: WorldSpec,
    pub scenario: ScenarioSpec,
    pub engine: EngineSettings,
    pub diversity: DiversitySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 3,
            out_dir: PathBuf::from("runs"),
            modes: vec![
                Mode::SourceOnly,
                Mode::Tbn,
                Mode::TemaOnly,
                Mode::FixedAlpha(0.5),
                Mode::Full,
            ],
            batch_sizes: vec![200, 64, 16, 4, 2, 1],
            sampler: Sampler::IidUniform,
            track_estimation: false,
            world: WorldSpec::default(),
            scenario: ScenarioSpec::default(),
            engine: EngineSettings::default(),
            diversity: DiversitySettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must list at least one mode".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch_sizes must be a nonempty list of positive sizes".into()));
        }
        self.world.validate().map_err(wrap)?;
        self.scenario.validate(self.world.corruptions).map_err(wrap)?;
        if let Sampler::FixedDiversity(d) = self.sampler {
            let smallest = self.batch_sizes.iter().min().copied().unwrap_or(0);
            if d > self.world.classes || d > smallest {
                return Err(Error::Config(format!(
                    "sampler fixed_diversity({d}) needs d <= classes ({}) and d <= every batch size (smallest {smallest})",
                    self.world.classes
                )));
            }
        }
        for &mode in &self.modes {
            self.engine.for_mode(mode).validate().map_err(wrap)?;
        }
        for &n in &self.diversity.batch_sizes {
            DiversityQuery::new(self.diversity.classes, n).map_err(wrap)?;
        }
        Ok(())
    }

    /// Seeds of the replicates, derived from the top-level seed.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates).map(|i| replicate_seed(self.seed, i)).collect()
    }
}
