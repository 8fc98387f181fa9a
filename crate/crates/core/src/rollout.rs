//! Group rollouts from a frozen policy with rule-based 0/1 rewards.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ErcError, Result};
use crate::policy::{PolicyParams, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// First response token must equal the prompt sum modulo the vocab size.
    DigitSumMod,
    /// Response must be the reversed prompt, followed by end-of-sequence.
    CopyReverse,
    /// First response token must equal the prompt sum modulo 2.
    Parity,
}

impl TaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::DigitSumMod => "digit-sum-mod",
            TaskKind::CopyReverse => "copy-reverse",
            TaskKind::Parity => "parity",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskKind {
    type Err = ErcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digit-sum-mod" => Ok(TaskKind::DigitSumMod),
            "copy-reverse" => Ok(TaskKind::CopyReverse),
            "parity" => Ok(TaskKind::Parity),
            other => Err(ErcError::domain(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardTask {
    pub kind: TaskKind,
    pub vocab: Vocab,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
}

impl RewardTask {
    pub fn new(kind: TaskKind, vocab: Vocab, prompt_len_min: usize, prompt_len_max: usize) -> Result<Self> {
        if prompt_len_min == 0 || prompt_len_min > prompt_len_max {
            return Err(ErcError::domain(format!(
                "invalid prompt length range {prompt_len_min}..={prompt_len_max}"
            )));
        }
        Ok(RewardTask { kind, vocab, prompt_len_min, prompt_len_max })
    }

    /// Prompt tokens are drawn uniformly from the non-eos ids.
    pub fn sample_prompt<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        let len = rng.gen_range(self.prompt_len_min..=self.prompt_len_max);
        let eos = self.vocab.eos();
        (0..len)
            .map(|_| {
                let t = rng.gen_range(0..self.vocab.size() - 1);
                if t >= eos { t + 1 } else { t }
            })
            .collect()
    }

    pub fn reward(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        compute_reward(self, prompt, response)
    }
}

pub fn compute_reward(task: &RewardTask, prompt: &[TokenId], response: &[TokenId]) -> f64 {
    let sum: usize = prompt.iter().sum();
    let hit = match task.kind {
        TaskKind::DigitSumMod => response.first() == Some(&(sum % task.vocab.size())),
        TaskKind::Parity => response.first() == Some(&(sum % 2)),
        TaskKind::CopyReverse => {
            let n = prompt.len();
            response.len() >= n
                && response.iter().take(n).eq(prompt.iter().rev())
                && (response.len() == n
                    || (response.len() == n + 1 && response[n] == task.vocab.eos()))
        }
    };
    if hit { 1.0 } else { 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub old_entropies: Vec<f64>,
    pub reward: f64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How the reward spread is measured when standardizing advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub prompt: Vec<TokenId>,
    pub trajectories: Vec<TrajectoryRecord>,
    /// One scalar per response, broadcast to each of its tokens.
    pub advantages: Vec<f64>,
    /// Dropped by dynamic sample filtering.
    pub filtered: bool,
}

impl PromptGroup {
    pub fn new(prompt: Vec<TokenId>, trajectories: Vec<TrajectoryRecord>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(ErcError::domain("a prompt group needs at least two trajectories"));
        }
        for t in &trajectories {
            if t.old_logprobs.len() != t.tokens.len() || t.old_entropies.len() != t.tokens.len() {
                return Err(ErcError::domain("trajectory field lengths differ"));
            }
        }
        let g = trajectories.len();
        Ok(PromptGroup { prompt, trajectories, advantages: vec![0.0; g], filtered: false })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(TrajectoryRecord::len).sum()
    }
}

/// Sample `g` responses autoregressively from `old` at temperature 1.
///
/// Old log-probs and entropies are recorded from the very distributions the
/// tokens were drawn from.
pub fn sample_group(
    old: &PolicyParams,
    task: &RewardTask,
    prompt: &[TokenId],
    g: usize,
    max_len: usize,
    seed: u64,
) -> Result<PromptGroup> {
    if g < 2 {
        return Err(ErcError::domain(format!("group size must be >= 2, got {g}")));
    }
    if max_len == 0 {
        return Err(ErcError::domain("max_len must be >= 1"));
    }
    let eos = old.vocab().eos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(g);
    for _ in 0..g {
        let mut tokens = Vec::with_capacity(max_len);
        let mut old_logprobs = Vec::with_capacity(max_len);
        let mut old_entropies = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let dist = old.forward(prompt, &tokens)?;
            let tok = draw(&dist.probs, rng.gen::<f64>());
            old_logprobs.push(dist.logprobs[tok]);
            old_entropies.push(dist.entropy);
            tokens.push(tok);
            if tok == eos {
                break;
            }
        }
        let reward = compute_reward(task, prompt, &tokens);
        trajectories.push(TrajectoryRecord {
            prompt: prompt.to_vec(),
            tokens,
            old_logprobs,
            old_entropies,
            reward,
        });
    }
    PromptGroup::new(prompt.to_vec(), trajectories)
}

fn draw(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative total.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Z-score rewards within the group with the population std.
pub fn standardize_advantages(group: PromptGroup, eps_std: f64) -> PromptGroup {
    standardize_advantages_with(group, eps_std, StdKind::Population)
}

pub fn standardize_advantages_with(mut group: PromptGroup, eps_std: f64, kind: StdKind) -> PromptGroup {
    let rewards = group.rewards();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => n - 1.0,
    };
    let std = (ss / denom).sqrt();
    if std == 0.0 {
        group.filtered = true;
        group.advantages = vec![0.0; rewards.len()];
    } else {
        group.filtered = false;
        group.advantages = rewards.iter().map(|r| (r - mean) / (std + eps_std)).collect();
    }
    group
}

/// One line of the rollout batch format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLine {
    pub group: usize,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub old_entropies: Vec<f64>,
    pub reward: f64,
}

/// Write groups as line-delimited JSON, one trajectory per line.
pub fn write_rollouts<W: Write>(mut out: W, groups: &[PromptGroup]) -> Result<()> {
    for (gi, group) in groups.iter().enumerate() {
        for t in &group.trajectories {
            let line = RolloutLine {
                group: gi,
                prompt: t.prompt.clone(),
                tokens: t.tokens.clone(),
                old_logprobs: t.old_logprobs.clone(),
                old_entropies: t.old_entropies.clone(),
                reward: t.reward,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Read a rollout batch back into groups (advantages unset).
pub fn read_rollouts<R: BufRead>(input: R) -> Result<Vec<PromptGroup>> {
    let mut buckets: Vec<(usize, Vec<TrajectoryRecord>)> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RolloutLine = serde_json::from_str(&line)?;
        let rec = TrajectoryRecord {
            prompt: r.prompt,
            tokens: r.tokens,
            old_logprobs: r.old_logprobs,
            old_entropies: r.old_entropies,
            reward: r.reward,
        };
        match buckets.last_mut() {
            Some((g, v)) if *g == r.group => v.push(rec),
            _ => buckets.push((r.group, vec![rec])),
        }
    }
    buckets
        .into_iter()
        .map(|(_, trajs)| PromptGroup::new(trajs[0].prompt.clone(), trajs))
        .collect()
}
