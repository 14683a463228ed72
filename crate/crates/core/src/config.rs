//! Sectioned experiment configuration.
//!
//! One section per concern: `[trainer]`, `[env]`, `[rollout]`, `[objective]`,
//! `[bapo]` and `[policy]`. Every key has a default, unknown keys are
//! rejected, and [`ExperimentConfig::resolve`] validates the whole thing into
//! a [`TrainerConfig`].

use serde::{Deserialize, Serialize};

use crate::bapo::BapoConfig;
use crate::env::{EnvSpec, RewardMode};
use crate::error::{invalid, Result};
use crate::objective::{ClipBounds, ObjectiveConfig};
use crate::policy::ParameterSharing;
use crate::trainer::{Algorithm, RolloutMode, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub learning_rate: f64,
    pub staleness_epochs: usize,
    pub group_size: usize,
    /// Defaults to every prompt of the environment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_per_batch: Option<usize>,
    pub seed: u64,
    /// `[c_low, c_high]` for fixed-bound algorithms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_bounds: Option<(f64, f64)>,
    pub std_normalize: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::GrpoFixed,
            steps: 100,
            learning_rate: 0.05,
            staleness_epochs: 0,
            group_size: 8,
            prompts_per_batch: None,
            seed: 0,
            fixed_bounds: None,
            std_normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub vocab_size: usize,
    pub horizon: usize,
    pub num_prompts: usize,
    pub reward_mode: RewardMode,
    /// Seed of the prompt targets, independent of the training seed.
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            horizon: 4,
            num_prompts: 8,
            reward_mode: RewardMode::ExactMatch,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutKind {
    #[default]
    Replay,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub mode: RolloutKind,
    /// Tokens per trajectory per step in partial mode.
    pub token_budget: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            mode: RolloutKind::Replay,
            token_budget: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub parameter_sharing: ParameterSharing,
    pub recenter_logits: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            parameter_sharing: ParameterSharing::Prefix,
            recenter_logits: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trainer: TrainerSection,
    pub env: EnvSection,
    pub rollout: RolloutSection,
    pub objective: ObjectiveConfig,
    pub bapo: BapoConfig,
    pub policy: PolicySection,
}

impl ExperimentConfig {
    /// Fills every optional key with the value it resolves to.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if out.trainer.prompts_per_batch.is_none() {
            out.trainer.prompts_per_batch = Some(out.env.num_prompts);
        }
        if out.trainer.fixed_bounds.is_none() {
            out.trainer.fixed_bounds = match out.trainer.algorithm {
                Algorithm::Asymmetric => {
                    return Err(invalid("trainer.fixed_bounds", "required for the asymmetric algorithm"))
                }
                other => Some(other.default_bounds().unwrap_or((0.8, 1.2))),
            };
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<TrainerConfig> {
        let r = self.resolved()?;
        let env = EnvSpec::generate(
            r.env.num_prompts,
            r.env.vocab_size,
            r.env.horizon,
            r.env.reward_mode,
            r.env.seed,
        )?;
        let (lo, hi) = r.trainer.fixed_bounds.expect("resolved");
        let fixed_bounds = ClipBounds::new(lo, hi).map_err(|e| invalid("trainer.fixed_bounds", e.to_string()))?;
        let rollout = match r.rollout.mode {
            RolloutKind::Replay => RolloutMode::Replay,
            RolloutKind::Partial => {
                if r.rollout.token_budget == 0 {
                    return Err(invalid("rollout.token_budget", "must be >= 1"));
                }
                RolloutMode::Partial {
                    token_budget: r.rollout.token_budget,
                }
            }
        };
        let cfg = TrainerConfig {
            algorithm: r.trainer.algorithm,
            steps: r.trainer.steps,
            learning_rate: r.trainer.learning_rate,
            staleness_epochs: r.trainer.staleness_epochs,
            env,
            group_size: r.trainer.group_size,
            prompts_per_batch: r.trainer.prompts_per_batch.expect("resolved"),
            seed: r.trainer.seed,
            bapo: r.bapo,
            fixed_bounds,
            objective: r.objective,
            rollout,
            std_normalize: r.trainer.std_normalize,
            sharing: r.policy.parameter_sharing,
            recenter_logits: r.policy.recenter_logits,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(cfg.prompts_per_batch, 8);
        assert_eq!((cfg.fixed_bounds.c_low(), cfg.fixed_bounds.c_high()), (0.8, 1.2));
        assert_eq!(cfg.rollout, RolloutMode::Replay);
    }

    #[test]
    fn clip_higher_default_bounds() {
        let mut c = ExperimentConfig::default();
        c.trainer.algorithm = Algorithm::ClipHigher;
        assert_eq!(c.resolve().unwrap().fixed_bounds.c_high(), 1.28);
        c.trainer.algorithm = Algorithm::Asymmetric;
        assert!(matches!(
            c.resolve(),
            Err(Error::Invalid {
                what: "trainer.fixed_bounds",
                ..
            })
        ));
    }

    #[test]
    fn field_errors_name_the_key() {
        let mut c = ExperimentConfig::default();
        c.bapo.rho0 = 1.5;
        assert!(c.resolve().unwrap_err().to_string().contains("rho0"));
        let mut c = ExperimentConfig::default();
        c.trainer.steps = 0;
        assert!(c.resolve().unwrap_err().to_string().contains("steps"));
        let mut c = ExperimentConfig::default();
        c.trainer.fixed_bounds = Some((1.1, 1.2));
        assert!(c.resolve().unwrap_err().to_string().contains("fixed_bounds"));
        let c = ExperimentConfig {
            rollout: RolloutSection {
                mode: RolloutKind::Partial,
                token_budget: 0,
            },
            ..Default::default()
        };
        assert!(c.resolve().unwrap_err().to_string().contains("token_budget"));
    }
}
