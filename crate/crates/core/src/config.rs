use serde::{Deserialize, Serialize};

use crate::data::DataShape;
use crate::error::{CdaError, Result};
use crate::par::ExecMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderArch {
    /// Three stride-2 3x3 conv blocks, global average pooling, linear to `D`.
    Conv { channels: [usize; 3] },
    /// Perceptron for flat vectors; `hidden: None` is a single linear map.
    Mlp { hidden: Option<usize> },
}

/// Output nonlinearity of the domain indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Sigmoid,
    Linear,
}

/// What the final classifier pass consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `L(z_t + z_e)`
    Residual,
    /// `L(z_e)`
    EnhancedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input: DataShape,
    pub feature_dim: usize,
    pub encoder: EncoderArch,
    pub classifier_hidden: Option<usize>,
    pub indicator_hidden: usize,
    pub gate: GateKind,
    pub discriminator_hidden: usize,
    pub decoder_hidden: usize,
    pub fusion: FusionMode,
}

impl ArchConfig {
    /// Desk-scale defaults for the given input shape.
    pub fn for_input(input: DataShape) -> Self {
        let encoder = match input {
            DataShape::Image { .. } => EncoderArch::Conv { channels: [8, 16, 32] },
            DataShape::Flat { .. } => EncoderArch::Mlp { hidden: Some(32) },
        };
        let feature_dim = 128;
        Self {
            input,
            feature_dim,
            encoder,
            classifier_hidden: None,
            indicator_hidden: feature_dim,
            gate: GateKind::Sigmoid,
            discriminator_hidden: 32,
            decoder_hidden: 64,
            fusion: FusionMode::Residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.indicator_hidden == 0 || self.discriminator_hidden == 0 || self.decoder_hidden == 0 {
            return Err(CdaError::Validation("network widths must be positive".into()));
        }
        if self.input.is_empty() {
            return Err(CdaError::Validation("input shape must be non-empty".into()));
        }
        if let (EncoderArch::Conv { channels }, DataShape::Image { .. }) = (&self.encoder, self.input) {
            if channels.contains(&0) {
                return Err(CdaError::Validation("conv channels must be positive".into()));
            }
        } else if matches!(self.encoder, EncoderArch::Conv { .. }) {
            return Err(CdaError::Validation("conv encoder needs image-shaped input".into()));
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    10
}
fn default_lr_source() -> f64 {
    1e-4
}
fn default_lr_target() -> f64 {
    1e-6
}
fn default_lr_dsn() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_batch_train() -> usize {
    16
}
fn default_batch_eval() -> usize {
    32
}
fn default_alt_ratio() -> usize {
    1
}
fn default_one() -> f64 {
    1.0
}
fn default_cap() -> usize {
    1000
}

/// Optimisation settings shared by every stage. Defaults follow the
/// full-scale recipe; [`TrainConfig::desk`] is tuned for the small
/// synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_source")]
    pub lr_source: f64,
    #[serde(default = "default_lr_target")]
    pub lr_target: f64,
    #[serde(default = "default_lr_dsn")]
    pub lr_dsn: f64,
    /// Discriminator rate; falls back to `lr_target` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_disc: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_train")]
    pub batch_train: usize,
    #[serde(default = "default_batch_eval")]
    pub batch_eval: usize,
    #[serde(default)]
    pub seed: u64,
    /// Discriminator steps per target-network step.
    #[serde(default = "default_alt_ratio")]
    pub alt_ratio: usize,
    /// Route target features through the memory module.
    #[serde(default = "default_true")]
    pub memory_enabled: bool,
    #[serde(default = "default_one")]
    pub lambda_conf: f64,
    #[serde(default = "default_one")]
    pub lambda_rec: f64,
    /// Source images used per target when computing domain distances.
    #[serde(default = "default_cap")]
    pub source_sample_cap: usize,
    /// Start stage D with a fresh discriminator instead of stage B's.
    #[serde(default = "default_true")]
    pub fresh_discriminator: bool,
    /// Record parameter hashes on every logged step.
    #[serde(default = "default_true")]
    pub log_hashes: bool,
    #[serde(default)]
    pub exec: ExecMode,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            lr_source: default_lr_source(),
            lr_target: default_lr_target(),
            lr_dsn: default_lr_dsn(),
            lr_disc: None,
            weight_decay: default_weight_decay(),
            batch_train: default_batch_train(),
            batch_eval: default_batch_eval(),
            seed: 0,
            alt_ratio: default_alt_ratio(),
            memory_enabled: true,
            lambda_conf: 1.0,
            lambda_rec: 1.0,
            source_sample_cap: default_cap(),
            fresh_discriminator: true,
            log_hashes: true,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rates scaled up for desk-sized networks and datasets, where
    /// the full-scale rates barely move the parameters in ten epochs. The
    /// discriminator learns faster than the target network so that its
    /// loss actually drops below ln 2, and stage D keeps stage B's
    /// discriminator.
    pub fn desk() -> Self {
        Self {
            lr_source: 1e-3,
            lr_target: 3e-5,
            lr_dsn: 1e-3,
            lr_disc: Some(1e-3),
            fresh_discriminator: false,
            ..Self::default()
        }
    }

    pub fn lr_disc(&self) -> f64 {
        self.lr_disc.unwrap_or(self.lr_target)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_source, self.lr_target, self.lr_dsn, self.lr_disc()];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CdaError::Validation("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CdaError::Validation("weight_decay must be non-negative".into()));
        }
        if self.batch_train == 0 || self.batch_eval == 0 || self.alt_ratio == 0 || self.source_sample_cap == 0 {
            return Err(CdaError::Validation(
                "batch sizes, alt_ratio and source_sample_cap must be positive".into(),
            ));
        }
        if self.lambda_conf < 0.0 || self.lambda_rec < 0.0 {
            return Err(CdaError::Validation("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
