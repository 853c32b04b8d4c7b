//! The single run configuration covering every pipeline stage.
//!
//! A [`RunConfig`] round-trips losslessly through pretty-printed JSON; every
//! pipeline command writes its resolved config next to its outputs so any
//! artifact can be reproduced from (config, seed) alone.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::env::WorldConfig;
use crate::favae::LadderConfig;
use crate::policy::PpoConfig;
use crate::segmentation::WindowConfig;
use crate::{Error, Result};

/// FAVAE stage settings. `input_len = 0` means "choose from the segment
/// length distribution"; an empty `c_last` means "run calibration first".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FavaeSettings {
    pub latent_dims: Vec<usize>,
    pub beta: f64,
    pub c_last: Vec<f64>,
    pub anneal_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub input_len: usize,
    pub channels: (usize, usize, usize),
}

impl Default for FavaeSettings {
    fn default() -> Self {
        let base = LadderConfig::for_input_len(11);
        FavaeSettings {
            latent_dims: base.latent_dims,
            beta: base.beta,
            c_last: Vec::new(),
            anneal_epochs: base.anneal_epochs,
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            input_len: 0,
            channels: base.channels,
        }
    }
}

impl FavaeSettings {
    /// Concrete model config once the padded input length is known.
    pub fn to_ladder(&self, input_len: usize) -> LadderConfig {
        LadderConfig {
            latent_dims: self.latent_dims.clone(),
            beta: self.beta,
            c_last: self.c_last.clone(),
            anneal_epochs: self.anneal_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            input_len,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Demonstrations generated per scripted expert.
    pub demos_per_script: usize,
    pub window: WindowConfig,
    pub favae: FavaeSettings,
    pub ppo: PpoConfig,
    /// Episodes used by `evaluate`.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldConfig::base(0),
            demos_per_script: 100,
            window: WindowConfig::default(),
            favae: FavaeSettings::default(),
            ppo: PpoConfig::default(),
            eval_episodes: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.window.validate()?;
        self.ppo.validate()?;
        if self.demos_per_script == 0 {
            return Err(Error::usage("demos_per_script must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::usage("eval_episodes must be at least 1"));
        }
        Ok(())
    }
}
