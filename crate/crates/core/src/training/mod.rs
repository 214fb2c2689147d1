//! Joint training of encoder, adjustment and decoder through the reduced
//! solver, and the baseline models (solver-in-the-loop corrector,
//! Dil-ResNet, stand-alone super-resolution).

mod adam;
mod loss;
mod pipeline;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelRole};
use crate::scenarios::{ScenarioConfig, ScenarioKind};

pub use adam::{Adam, AdamHyper, ParamBlock};
pub use loss::{loss_eq1, norm, sol_loss, LossNorm};
pub use pipeline::{rollout_ato, Pipeline, PipelineKind, Rollout, RolloutRecord, SimContext, Transfer, WindowData};
pub use train::{config_hash, dataset_loss, load_trained, train, training_windows, write_log, EpochLog, PipelineInfo, TrainOutcome, Window, LOG_HEADER};

pub const TRAIN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ato,
    Sol,
    DilResnet,
    SrOnly,
}

/// Switches removing one part of the joint model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Drop the latent term of the loss.
    pub no_latent_loss: bool,
    /// Use the linearly down-sampled frame as the latent state.
    pub no_encoder: bool,
    /// Replace the reduced solver by a jointly trained Dil-ResNet.
    pub no_solver: bool,
    /// Let the latent state evolve without adjustment.
    pub no_adjustment: bool,
    /// Feed linearly down-sampled forces instead of encoded ones.
    pub lerp_forces: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.no_latent_loss || self.no_encoder || self.no_solver || self.no_adjustment || self.lerp_forces
    }
}

/// Where the super-resolution model takes its reduced inputs from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrSource {
    /// Linearly down-sampled reference frames.
    #[default]
    Reference,
    /// Rollouts of a frozen upstream corrector or Dil-ResNet passed in as the
    /// initial model set.
    Upstream,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// Epochs between decays.
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 4e-4, decay: 0.9, interval: 10 }
    }
}

impl LrSchedule {
    /// `initial · decay^⌊epoch / interval⌋` for a zero-based epoch.
    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.interval.max(1)) as i32)
    }
}

fn default_version() -> u32 {
    TRAIN_CONFIG_VERSION
}
fn default_one() -> f64 {
    1.0
}
fn default_batch() -> usize {
    10
}
fn default_noise() -> f64 {
    0.01
}
fn default_restarts() -> usize {
    3
}
fn default_final_scale() -> f64 {
    0.1
}

/// Training recipe. Written as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub model_kind: ModelKind,
    /// Scenario the dataset must come from.
    pub scenario: ScenarioKind,
    /// Integrated solver steps of the final stage.
    pub steps: usize,
    #[serde(default = "default_one")]
    pub lambda_hires: f64,
    /// Defaults per scenario: 1 Karman, 10 decaying, 100 forced, 10 smoke.
    #[serde(default)]
    pub lambda_latent: Option<f64>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Windows drawn per epoch; all training windows when absent.
    #[serde(default)]
    pub windows_per_epoch: Option<usize>,
    #[serde(default)]
    pub lr: LrSchedule,
    /// Step counts trained before the final stage, strictly increasing.
    #[serde(default)]
    pub warm_start: Vec<usize>,
    #[serde(default)]
    pub ablations: Ablations,
    /// Input noise of the one-step Dil-ResNet training.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub sr_source: SrSource,
    #[serde(default)]
    pub norm: LossNorm,
    #[serde(default = "default_restarts")]
    pub max_restarts: usize,
    /// Scale applied to the freshly initialized last layer of every network.
    #[serde(default = "default_final_scale")]
    pub final_layer_scale: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRAIN_CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported version {}", self.version)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.lambda_hires >= 0.0) || self.lambda_latent.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::config("lambda", "loss weights must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::config("windows_per_epoch", "must be at least 1"));
        }
        if !(self.lr.initial >= 0.0) || !(self.lr.decay > 0.0) || self.lr.interval == 0 {
            return Err(Error::config("lr", "needs initial ≥ 0, decay > 0, interval ≥ 1"));
        }
        if self.ablations.any() && self.model_kind != ModelKind::Ato {
            return Err(Error::config("ablations", "only valid for model_kind ato"));
        }
        let chain = self.stages();
        if chain.windows(2).any(|w| w[0] >= w[1]) || chain.contains(&0) {
            return Err(Error::config("warm_start", "step counts must increase strictly and end below `steps`"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if self.sr_source == SrSource::Upstream && self.model_kind != ModelKind::SrOnly {
            return Err(Error::config("sr_source", "only valid for model_kind sr_only"));
        }
        Ok(())
    }

    /// Step count of every stage, warm starts first.
    pub fn stages(&self) -> Vec<usize> {
        let mut s = self.warm_start.clone();
        s.push(self.steps);
        s
    }

    pub fn latent_weight(&self) -> f64 {
        if self.ablations.no_latent_loss {
            return 0.0;
        }
        self.lambda_latent.unwrap_or(match self.scenario {
            ScenarioKind::Karman => 1.0,
            ScenarioKind::DecayingTurbulence | ScenarioKind::SmokePlume => 10.0,
            ScenarioKind::ForcedTurbulence => 100.0,
        })
    }

    /// Networks this configuration trains.
    pub fn trainable_roles(&self) -> Vec<ModelRole> {
        match self.model_kind {
            ModelKind::Ato => {
                let a = &self.ablations;
                let mut roles = Vec::new();
                if !a.no_encoder {
                    roles.push(ModelRole::Encoder);
                }
                if !a.no_adjustment {
                    roles.push(ModelRole::Adjustment);
                }
                roles.push(ModelRole::Decoder);
                if a.no_solver {
                    roles.push(ModelRole::DilResnet);
                }
                roles
            }
            ModelKind::Sol => vec![ModelRole::SolCorrector],
            ModelKind::DilResnet => vec![ModelRole::DilResnet],
            ModelKind::SrOnly => vec![ModelRole::SuperResolution],
        }
    }

    pub fn model_config(&self, scenario: &ScenarioConfig) -> ModelConfig {
        ModelConfig { padding: scenario.padding(), extra_inputs: scenario.extra_inputs(), roles: self.trainable_roles() }
    }

    pub fn pipeline_kind(&self) -> PipelineKind {
        match self.model_kind {
            ModelKind::Ato => PipelineKind::Ato(self.ablations),
            ModelKind::Sol => PipelineKind::Sol,
            ModelKind::DilResnet => PipelineKind::DilResnet,
            ModelKind::SrOnly => PipelineKind::Baseline,
        }
    }
}
