//! Clipped policy-gradient objectives (PG, PPO-clip, PPO-penalty, GRPO,
//! DAPO, GPPO) with entropy-ratio clipping, on toy verifiable-reward tasks.
//!
//! Layout follows the data flow of a run:
//!
//! - [`policy`]: softmax policies and their exact gradients
//! - [`rollout`]: group sampling, rewards and advantage standardization
//! - [`objectives`]: surrogate objectives, ERC masking, batch gradients
//! - [`trainer`]: the off-policy mini-batch loop and per-update metrics
//! - [`diagnostics`]: tables and histograms built from token dumps
//! - [`config`] and [`cli`]: the experiment runner

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod objectives;
pub mod parallel;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod trainer;

pub use error::{ErcError, Result};
pub use objectives::{
    batch_objective, batch_objective_with, entropy_ratio, erc_mask, importance_ratio, surrogate_term, Aggregation,
    BatchObjective, ErcSide, ObjectiveConfig, TokenEval, Variant,
};
pub use parallel::Execution;
pub use policy::{Backend, PolicyParams, PolicyShape, TokenDistribution, Vocab};
pub use rollout::{compute_reward, sample_group, standardize_advantages, PromptGroup, RewardTask, TaskKind, TrajectoryRecord};
pub use trainer::{clip_fractions, train, StepMetrics, TrainConfig, TrainReport};
