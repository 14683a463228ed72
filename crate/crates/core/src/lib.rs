//! Clipped policy-gradient laboratory on exact tabular softmax policies.
//!
//! Small synthetic environments, grouped rollouts with GRPO advantages,
//! fixed and adaptive clipping, first-order entropy theory checks, and a
//! deterministic trainer that logs training dynamics.

pub mod bapo;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod theory;
pub mod trainer;

pub use bapo::{adapt_bounds, bapo_update, fixed_update, BapoConfig, BoundSearchTrace, SearchTerminal, UpdateOutcome};
pub use config::ExperimentConfig;
pub use env::{EnvSpec, RewardMode, Target, Trajectory};
pub use error::{Error, Result};
pub use metrics::MetricsRow;
pub use objective::{
    batch_gradient, clip_indicator, contribution_ratio, surrogate_term, ClipBounds, LossAgg, LossBreakdown,
    ObjectiveConfig, RatioWeighting,
};
pub use policy::{GradientTable, ParameterSharing, PolicyTable, StateId, Token};
pub use rng::SeedStream;
pub use rollout::{PartialRolloutBuffer, RolloutBatch, TokenRecord};
pub use trainer::{Algorithm, RunOutput, TrainerConfig};
