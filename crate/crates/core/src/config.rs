//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! output_dir = runs/erc-dapo
//! objective.variant = dapo
//! objective.erc_enabled = true
//! train.seed = 3
//! ```
//!
//! Keys not given fall back to defaults. Clip bounds and aggregation default
//! per `objective.variant`; the learning rate defaults per `train.optimizer`.
//! [`ExperimentConfig::to_text`] writes every key, and parsing that text
//! yields the same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{ErcError, Result};
use crate::objectives::{ObjectiveConfig, Variant};
use crate::parallel::Execution;
use crate::policy::{Backend, PolicyParams, PolicyShape, Vocab};
use crate::rollout::{RewardTask, TaskKind};
use crate::seed;
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySettings {
    pub backend: Backend,
    pub context_window: usize,
    pub prompt_buckets: usize,
    pub init_scale: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            backend: Backend::LinearSoftmax,
            context_window: 2,
            prompt_buckets: 64,
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub task: RewardTask,
    pub policy: PolicySettings,
    pub output_dir: PathBuf,
    pub dump_tokens: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = Vocab::new(10).expect("static vocab");
        ExperimentConfig {
            train: TrainConfig::default(),
            objective: ObjectiveConfig::for_variant(Variant::Dapo),
            task: RewardTask { kind: TaskKind::DigitSumMod, vocab, prompt_len_min: 2, prompt_len_max: 2 },
            policy: PolicySettings::default(),
            output_dir: PathBuf::from("runs/default"),
            dump_tokens: false,
        }
    }
}

/// Where a key's value came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

impl Origin {
    fn err(self, message: impl Into<String>) -> ErcError {
        match self {
            Origin::Line(l) => ErcError::config_at(l, message),
            Origin::Override => ErcError::config(format!("override: {}", message.into())),
        }
    }
}

pub const KEYS: &[&str] = &[
    "output_dir",
    "dump_tokens",
    "train.prompt_batch",
    "train.mini_batch",
    "train.group_size",
    "train.max_len",
    "train.steps",
    "train.learning_rate",
    "train.optimizer",
    "train.seed",
    "train.grad_clip_norm",
    "train.eps_std",
    "train.execution",
    "objective.variant",
    "objective.eps_low",
    "objective.eps_high",
    "objective.beta_kl",
    "objective.alpha_entropy",
    "objective.erc_enabled",
    "objective.beta_low",
    "objective.beta_high",
    "objective.aggregation",
    "objective.eps_h",
    "task.kind",
    "task.vocab",
    "task.prompt_len_min",
    "task.prompt_len_max",
    "policy.backend",
    "policy.context_window",
    "policy.prompt_buckets",
    "policy.init_scale",
];

/// Raw key/value entries with their origin; later entries replace earlier ones
/// only through [`RawConfig::set_override`].
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (Origin, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ErcError::config_at(lineno, format!("expected `key = value`, got `{body}`")))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ErcError::config_at(lineno, format!("unknown key `{key}`")));
            }
            if let Some((Origin::Line(prev), _)) = raw.entries.get(key) {
                return Err(ErcError::config_at(lineno, format!("duplicate key `{key}` (first set at line {prev})")));
            }
            raw.entries.insert(key.to_string(), (Origin::Line(lineno), value.trim().to_string()));
        }
        Ok(raw)
    }

    /// Apply a `key=value` override.
    pub fn set_override(&mut self, entry: &str) -> Result<()> {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| ErcError::config(format!("override `{entry}` is not key=value")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(ErcError::config(format!("override: unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), (Origin::Override, value.trim().to_string()));
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<(Origin, T)>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((origin, v)) => v
                .parse::<T>()
                .map(|x| Some((*origin, x)))
                .map_err(|e| origin.err(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    fn origin(&self, key: &str) -> Option<Origin> {
        self.entries.get(key).map(|(o, _)| *o)
    }

    /// Turn a validation error into a config error, pointing at the line of
    /// the first key its message names.
    fn locate(&self, section: &str, err: ErcError) -> ErcError {
        let message = match err {
            ErcError::Config { message, .. } | ErcError::InputDomain(message) => message,
            other => other.to_string(),
        };
        let named = KEYS
            .iter()
            .filter(|k| k.starts_with(section))
            .filter_map(|k| {
                let short = &k[section.len()..];
                let pos = message.find(k).or_else(|| {
                    let mut at = 0;
                    message.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.')).find_map(|w| {
                        let here = at;
                        at += w.len() + 1;
                        (w == short).then_some(here)
                    })
                })?;
                Some((pos, self.origin(k)?))
            })
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, o)| o);
        match named {
            Some(o) => o.err(message),
            None => ErcError::config(message),
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        macro_rules! val {
            ($key:expr, $default:expr) => {
                self.get($key)?.map_or($default, |(_, v)| v)
            };
        }

        let optimizer: OptimizerKind = val!("train.optimizer", d.train.optimizer);
        let grad_clip_norm = match self.entries.get("train.grad_clip_norm") {
            None => None,
            Some((_, v)) if v == "none" => None,
            Some(_) => self.get::<f64>("train.grad_clip_norm")?.map(|(_, v)| v),
        };
        let train = TrainConfig {
            prompt_batch: val!("train.prompt_batch", d.train.prompt_batch),
            mini_batch: val!("train.mini_batch", d.train.mini_batch),
            group_size: val!("train.group_size", d.train.group_size),
            max_len: val!("train.max_len", d.train.max_len),
            steps: val!("train.steps", d.train.steps),
            learning_rate: val!("train.learning_rate", optimizer.default_learning_rate()),
            optimizer,
            seed: val!("train.seed", d.train.seed),
            grad_clip_norm,
            eps_std: val!("train.eps_std", d.train.eps_std),
            execution: match self.entries.get("train.execution") {
                None => d.train.execution,
                Some((o, v)) => parse_execution(v).ok_or_else(|| o.err(format!("bad value `{v}` for `train.execution`")))?,
            },
        };
        train.validate().map_err(|e| self.locate("train.", e))?;

        let variant: Variant = val!("objective.variant", d.objective.variant);
        let base = ObjectiveConfig::for_variant(variant);
        let objective = ObjectiveConfig {
            variant,
            eps_low: val!("objective.eps_low", base.eps_low),
            eps_high: val!("objective.eps_high", base.eps_high),
            beta_kl: val!("objective.beta_kl", base.beta_kl),
            alpha_entropy: val!("objective.alpha_entropy", base.alpha_entropy),
            erc_enabled: val!("objective.erc_enabled", base.erc_enabled),
            beta_low: val!("objective.beta_low", base.beta_low),
            beta_high: val!("objective.beta_high", base.beta_high),
            aggregation: val!("objective.aggregation", base.aggregation),
            eps_h: val!("objective.eps_h", base.eps_h),
        };
        objective.validate().map_err(|e| self.locate("objective.", e))?;

        let vocab_size: usize = val!("task.vocab", d.task.vocab.size());
        let vocab = Vocab::new(vocab_size).map_err(|e| {
            self.origin("task.vocab").map_or_else(|| ErcError::config(e.to_string()), |o| o.err(e.to_string()))
        })?;
        let task = RewardTask::new(
            val!("task.kind", d.task.kind),
            vocab,
            val!("task.prompt_len_min", d.task.prompt_len_min),
            val!("task.prompt_len_max", d.task.prompt_len_max),
        )
        .map_err(|e| self.locate("task.", e))?;

        let policy = PolicySettings {
            backend: val!("policy.backend", d.policy.backend),
            context_window: val!("policy.context_window", d.policy.context_window),
            prompt_buckets: val!("policy.prompt_buckets", d.policy.prompt_buckets),
            init_scale: val!("policy.init_scale", d.policy.init_scale),
        };
        if !(policy.init_scale >= 0.0) {
            return Err(ErcError::config("policy.init_scale must be nonnegative"));
        }

        let output_dir = match self.entries.get("output_dir") {
            Some((_, v)) => PathBuf::from(v),
            None => d.output_dir,
        };
        Ok(ExperimentConfig {
            train,
            objective,
            task,
            policy,
            output_dir,
            dump_tokens: val!("dump_tokens", d.dump_tokens),
        })
    }
}

fn parse_execution(s: &str) -> Option<Execution> {
    match s {
        "parallel" => Some(Execution::Parallel),
        "sequential" => Some(Execution::Sequential),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.build()
    }

    pub fn policy_shape(&self) -> PolicyShape {
        let p = &self.policy;
        match p.backend {
            Backend::TabularContext => PolicyShape::tabular(self.task.vocab, p.context_window, p.prompt_buckets),
            Backend::LinearSoftmax => PolicyShape::linear(self.task.vocab, p.context_window),
        }
    }

    pub fn initial_policy(&self) -> Result<PolicyParams> {
        PolicyParams::init(self.policy_shape(), self.policy.init_scale, self.train.seed)
    }

    /// Full snapshot, every key explicit.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let o = &self.objective;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("output_dir", self.output_dir.display().to_string());
        kv("dump_tokens", self.dump_tokens.to_string());
        kv("train.prompt_batch", t.prompt_batch.to_string());
        kv("train.mini_batch", t.mini_batch.to_string());
        kv("train.group_size", t.group_size.to_string());
        kv("train.max_len", t.max_len.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.learning_rate", format!("{:?}", t.learning_rate));
        kv("train.optimizer", t.optimizer.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.grad_clip_norm", t.grad_clip_norm.map_or("none".into(), |c| format!("{c:?}")));
        kv("train.eps_std", format!("{:?}", t.eps_std));
        kv(
            "train.execution",
            match t.execution {
                Execution::Parallel => "parallel",
                Execution::Sequential => "sequential",
            }
            .into(),
        );
        kv("objective.variant", o.variant.to_string());
        kv("objective.eps_low", format!("{:?}", o.eps_low));
        kv("objective.eps_high", format!("{:?}", o.eps_high));
        kv("objective.beta_kl", format!("{:?}", o.beta_kl));
        kv("objective.alpha_entropy", format!("{:?}", o.alpha_entropy));
        kv("objective.erc_enabled", o.erc_enabled.to_string());
        kv("objective.beta_low", format!("{:?}", o.beta_low));
        kv("objective.beta_high", format!("{:?}", o.beta_high));
        kv("objective.aggregation", o.aggregation.to_string());
        kv("objective.eps_h", format!("{:?}", o.eps_h));
        kv("task.kind", self.task.kind.to_string());
        kv("task.vocab", self.task.vocab.size().to_string());
        kv("task.prompt_len_min", self.task.prompt_len_min.to_string());
        kv("task.prompt_len_max", self.task.prompt_len_max.to_string());
        kv("policy.backend", self.policy.backend.to_string());
        kv("policy.context_window", self.policy.context_window.to_string());
        kv("policy.prompt_buckets", self.policy.prompt_buckets.to_string());
        kv("policy.init_scale", format!("{:?}", self.policy.init_scale));
        s
    }

    /// Stable hash of the snapshot text, recorded in analysis manifests.
    pub fn hash(&self) -> String {
        format!("{:016x}", seed::fnv1a(self.to_text().as_bytes()))
    }
}
