//! Run configuration: one TOML file fully determines a run.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hopper_core::mht::MhtConfig;
use hopper_core::perception::NoiseConfig;
use hopper_core::tracker::MatchWeights;
use hopper_core::training::{PipelineConfig, TrainConfig};
use hopper_core::worldsim::{ActionProbs, SimConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory name under the runs root.
    pub name: String,
    /// Master seed for generation, splitting, and training.
    pub seed: u64,
    pub data: DataSection,
    pub noise: NoiseConfig,
    pub tracking: TrackingSection,
    pub model: MhtConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            data: DataSection::default(),
            noise: NoiseConfig::none(),
            tracking: TrackingSection::default(),
            model: MhtConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub t_frames: usize,
    pub n_objects: usize,
    /// Episodes kept per last-visible-frame bin before splitting.
    pub per_bin: usize,
    pub train_ratio: f64,
    pub action_probs: ActionProbs,
    /// How many validation samples to carve from the test split during
    /// training (stride-sampled; 0 disables validation).
    pub val_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            t_frames: sim.t_frames,
            n_objects: sim.n_objects,
            per_bin: 230,
            train_ratio: 0.7,
            action_probs: sim.action_probs,
            val_max: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub weights: MatchWeights,
    /// Replace minimum-cost association with raw detector slot order.
    pub identity_tracking: bool,
    pub encoder_seed: u64,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            weights: p.match_weights,
            identity_tracking: p.identity_tracking,
            encoder_seed: p.encoder_seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.t_frames != self.data.t_frames {
            bail!(
                "model.t_frames ({}) must equal data.t_frames ({})",
                self.model.t_frames,
                self.data.t_frames
            );
        }
        if self.data.n_objects > self.model.n_tracks {
            bail!(
                "data.n_objects ({}) exceeds model.n_tracks ({})",
                self.data.n_objects,
                self.model.n_tracks
            );
        }
        if !(0.0..=1.0).contains(&self.data.train_ratio) {
            bail!("data.train_ratio must be in [0, 1]");
        }
        if self.name.is_empty() || self.name.contains(std::path::is_separator) {
            bail!("run name must be a non-empty single path component");
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_objects: self.data.n_objects,
            t_frames: self.data.t_frames,
            action_probs: self.data.action_probs.clone(),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            noise: self.noise.clone(),
            match_weights: self.tracking.weights,
            identity_tracking: self.tracking.identity_tracking,
            encoder_seed: self.tracking.encoder_seed,
        }
    }
}
