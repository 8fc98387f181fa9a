//! Off-policy mini-batch training loop.
//!
//! Each step freezes the current policy, samples a prompt batch of groups
//! from it, then walks the batch in mini-batches, taking one optimizer
//! ascent step per mini-batch against the frozen snapshot. Only the first
//! mini-batch of a step is on-policy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ErcError, Result};
use crate::objectives::{batch_objective_with, mean, ObjectiveConfig, TokenEval};
use crate::parallel::{self, Execution};
use crate::policy::{PolicyParams, TokenId};
use crate::rollout::{sample_group, standardize_advantages, PromptGroup, RewardTask};
use crate::seed;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 2.0,
            OptimizerKind::Adam => 0.1,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OptimizerKind {
    type Err = ErcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(ErcError::domain(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompt_batch: usize,
    pub mini_batch: usize,
    pub group_size: usize,
    pub max_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub eps_std: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompt_batch: 32,
            mini_batch: 4,
            group_size: 8,
            max_len: 8,
            steps: 200,
            learning_rate: OptimizerKind::Adam.default_learning_rate(),
            optimizer: OptimizerKind::Adam,
            seed: 0,
            grad_clip_norm: None,
            eps_std: 1e-8,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prompt_batch", self.prompt_batch),
            ("mini_batch", self.mini_batch),
            ("max_len", self.max_len),
            ("steps", self.steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ErcError::config(format!("train.{name} must be positive")));
            }
        }
        if self.group_size < 2 {
            return Err(ErcError::config("train.group_size must be >= 2"));
        }
        if self.prompt_batch % self.mini_batch != 0 {
            return Err(ErcError::config(format!(
                "train.mini_batch ({}) must divide train.prompt_batch ({})",
                self.mini_batch, self.prompt_batch
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ErcError::config("train.learning_rate must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(ErcError::config("train.grad_clip_norm must be positive"));
            }
        }
        if !(self.eps_std >= 0.0) {
            return Err(ErcError::config("train.eps_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn mini_batches_per_step(&self) -> usize {
        self.prompt_batch / self.mini_batch
    }
}

/// First-order optimizer performing gradient ascent.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { dim } else { 0 };
        Optimizer { kind, lr, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn ascend(&mut self, weights: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w += self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (((w, g), m), v) in weights.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w += self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mini_batch_index: usize,
    /// Tokens evaluated; zero when every group of the mini-batch was filtered
    /// and no update was made (clip fractions are then reported as 0).
    pub tokens: usize,
    pub objective: f64,
    /// L2 norm before any clipping.
    pub grad_norm: f64,
    pub mean_entropy: f64,
    pub is_clip_fraction: f64,
    pub erc_clip_fraction: f64,
    pub mean_reward: f64,
    pub filtered_group_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub policy: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    /// Steps whose every group was filtered; no update was made.
    pub skipped_steps: Vec<usize>,
}

/// Fractions of tokens suppressed by the importance clip and by the ERC mask.
pub fn clip_fractions(evals: &[TokenEval]) -> Result<(f64, f64)> {
    if evals.is_empty() {
        return Err(ErcError::EmptyInput("token evaluations"));
    }
    let n = evals.len() as f64;
    let is = evals.iter().filter(|e| e.is_clipped).count() as f64 / n;
    let erc = evals.iter().filter(|e| e.erc_mask == 0).count() as f64 / n;
    Ok((is, erc))
}

/// Sample the rollout batch for one step from the frozen policy.
pub fn sample_step(
    old: &PolicyParams,
    task: &RewardTask,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<PromptGroup>> {
    let mut rng = seed::rng(cfg.seed, "prompts", &[step as u64]);
    let prompts: Vec<Vec<TokenId>> = (0..cfg.prompt_batch).map(|_| task.sample_prompt(&mut rng)).collect();
    parallel::map(cfg.execution, &prompts, |i, prompt| {
        let s = seed::derive(cfg.seed, "rollout", &[step as u64, i as u64]);
        sample_group(old, task, prompt, cfg.group_size, cfg.max_len, s)
            .map(|g| standardize_advantages(g, cfg.eps_std))
    })
    .into_iter()
    .collect()
}

pub fn train(
    policy: PolicyParams,
    task: &RewardTask,
    train_cfg: &TrainConfig,
    obj_cfg: &ObjectiveConfig,
) -> Result<TrainReport> {
    train_observed(policy, task, train_cfg, obj_cfg, |_, _| Ok(()))
}

/// Train, calling `observe` after every mini-batch update with its metrics
/// and token evaluations.
pub fn train_observed<F>(
    mut policy: PolicyParams,
    task: &RewardTask,
    train_cfg: &TrainConfig,
    obj_cfg: &ObjectiveConfig,
    mut observe: F,
) -> Result<TrainReport>
where
    F: FnMut(&StepMetrics, &[TokenEval]) -> Result<()>,
{
    train_cfg.validate()?;
    obj_cfg.validate()?;
    if task.vocab != policy.vocab() {
        return Err(ErcError::domain("task and policy vocabularies differ"));
    }
    let mut opt = Optimizer::new(train_cfg.optimizer, train_cfg.learning_rate, policy.weights().len());
    let mut metrics = Vec::new();
    let mut skipped_steps = Vec::new();

    for step in 0..train_cfg.steps {
        let old = policy.clone();
        let groups = sample_step(&old, task, train_cfg, step)?;
        if groups.iter().all(|g| g.filtered) {
            skipped_steps.push(step);
            continue;
        }
        for (mb, chunk) in groups.chunks(train_cfg.mini_batch).enumerate() {
            let mean_reward = mean(chunk.iter().flat_map(|g| g.trajectories.iter().map(|t| t.reward)));
            let filtered = chunk.iter().filter(|g| g.filtered).count() as f64 / chunk.len() as f64;
            let mut m = StepMetrics {
                step,
                mini_batch_index: mb,
                tokens: 0,
                objective: 0.0,
                grad_norm: 0.0,
                mean_entropy: 0.0,
                is_clip_fraction: 0.0,
                erc_clip_fraction: 0.0,
                mean_reward,
                filtered_group_fraction: filtered,
            };
            if filtered == 1.0 {
                observe(&m, &[])?;
                metrics.push(m);
                continue;
            }
            let mut batch = batch_objective_with(obj_cfg, chunk, &policy, &old, train_cfg.execution)?;
            let norm = batch.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            if let Some(limit) = train_cfg.grad_clip_norm {
                if norm > limit {
                    let s = limit / norm;
                    batch.gradient.iter_mut().for_each(|g| *g *= s);
                }
            }
            opt.ascend(policy.weights_mut(), &batch.gradient);
            let (is, erc) = clip_fractions(&batch.token_evals)?;
            m.tokens = batch.token_evals.len();
            m.objective = batch.objective;
            m.grad_norm = norm;
            m.mean_entropy = batch.mean_new_entropy();
            m.is_clip_fraction = is;
            m.erc_clip_fraction = erc;
            observe(&m, &batch.token_evals)?;
            metrics.push(m);
        }
    }
    Ok(TrainReport { policy, metrics, skipped_steps })
}
