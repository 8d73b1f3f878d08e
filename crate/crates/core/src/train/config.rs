use serde::{Deserialize, Serialize};

use crate::data::ErrorSynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Optimization settings for both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_decay_epoch: usize,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_decay_epoch: usize,
    pub decay_factor: f64,
    pub loss: LossWeights,
    pub include_pose_loss_stage2: bool,
    /// Keep PoseNet weights fixed during stage two.
    pub freeze_posenet: bool,
    /// Corrupt input 2D poses during training.
    pub synthesize_errors: bool,
    pub error_synth: ErrorSynthConfig,
    /// Hard cap on stage-two optimizer steps.
    pub stage2_max_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            stage1_epochs: 60,
            stage1_lr: 1e-3,
            stage1_decay_epoch: 30,
            stage2_epochs: 15,
            stage2_lr: 1e-3,
            stage2_decay_epoch: 12,
            decay_factor: 10.0,
            loss: LossWeights::default(),
            include_pose_loss_stage2: true,
            freeze_posenet: false,
            synthesize_errors: true,
            error_synth: ErrorSynthConfig::default(),
            stage2_max_iterations: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// Full-batch schedule for overfitting 64 samples on a CPU.
    ///
    /// With one step per epoch the edge term starts at the same fraction of
    /// stage two as in [`TrainConfig::paper`] (epoch 7 of 15).
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            stage1_epochs: 2000,
            stage1_decay_epoch: 1000,
            stage2_epochs: 2000,
            stage2_decay_epoch: 1400,
            loss: LossWeights {
                edge_loss_start_epoch: 934,
                ..LossWeights::default()
            },
            synthesize_errors: false,
            stage2_max_iterations: Some(2000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch normalization)".into(),
            ));
        }
        for (stage, epochs, decay, lr) in [
            (1, self.stage1_epochs, self.stage1_decay_epoch, self.stage1_lr),
            (2, self.stage2_epochs, self.stage2_decay_epoch, self.stage2_lr),
        ] {
            if !(epochs > decay && decay > 0) {
                return Err(Error::Config(format!(
                    "stage {stage}: need epochs ({epochs}) > decay epoch ({decay}) > 0"
                )));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("stage {stage}: learning rate {lr} must be > 0")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config("decay_factor must be > 0".into()));
        }
        if self.stage2_max_iterations == Some(0) {
            return Err(Error::Config("stage2_max_iterations must be positive".into()));
        }
        self.loss.validate()?;
        self.error_synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        TrainConfig::paper().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn decay_must_precede_end() {
        let cfg = TrainConfig {
            stage1_decay_epoch: 60,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            stage2_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"batch_sise": 4}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"batch_size": 4}"#).unwrap();
        assert_eq!(cfg.stage1_epochs, 60);
    }
}
