//! Clipped surrogate objectives, entropy-ratio masking and their exact
//! parameter gradients.
//!
//! Per token `(i, t)` of an unfiltered group the batch objective adds
//!
//! ```text
//! w_it * mask_it * surrogate(ratio_it, A_i)
//!     - beta_kl       / N * KL(pi_old(.|ctx) || pi_new(.|ctx))   (ppo-penalty)
//!     + alpha_entropy / N * H(pi_new(.|ctx))                      (entropy bonus)
//! ```
//!
//! where `w_it` is `1 / sum_i |y_i|` under token-level aggregation and
//! `1 / (R * |y_i|)` under per-response-mean aggregation (R responses in the
//! batch), and `N` is the number of evaluated tokens. The mask and the clip
//! branch are piecewise constant and are held fixed when differentiating.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ErcError, Result};
use crate::parallel::{self, Execution};
use crate::policy::{scatter_rows, PolicyParams, TokenId};
use crate::rollout::PromptGroup;

/// Floor for the old-policy entropy in the entropy-ratio denominator.
pub const DEFAULT_EPS_H: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Pg,
    PpoClip,
    PpoPenalty,
    Grpo,
    Dapo,
    Gppo,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Pg,
        Variant::PpoClip,
        Variant::PpoPenalty,
        Variant::Grpo,
        Variant::Dapo,
        Variant::Gppo,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Pg => "pg",
            Variant::PpoClip => "ppo-clip",
            Variant::PpoPenalty => "ppo-penalty",
            Variant::Grpo => "grpo",
            Variant::Dapo => "dapo",
            Variant::Gppo => "gppo",
        }
    }

    /// Whether the surrogate clips the importance ratio at all.
    pub fn clips(self) -> bool {
        !matches!(self, Variant::Pg | Variant::PpoPenalty)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = ErcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| ErcError::domain(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Average within each response, then across responses.
    PerResponseMean,
    /// Average over every token of the batch.
    TokenLevel,
}

impl Aggregation {
    pub fn tag(self) -> &'static str {
        match self {
            Aggregation::PerResponseMean => "per-response-mean",
            Aggregation::TokenLevel => "token-level",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Aggregation {
    type Err = ErcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-response-mean" => Ok(Aggregation::PerResponseMean),
            "token-level" => Ok(Aggregation::TokenLevel),
            other => Err(ErcError::domain(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub alpha_entropy: f64,
    pub erc_enabled: bool,
    pub beta_low: f64,
    pub beta_high: f64,
    pub aggregation: Aggregation,
    pub eps_h: f64,
}

impl ObjectiveConfig {
    /// Conventional defaults for each variant, ERC off.
    pub fn for_variant(variant: Variant) -> Self {
        let (eps_low, eps_high, aggregation, beta_kl) = match variant {
            Variant::Pg => (0.2, 0.2, Aggregation::TokenLevel, 0.0),
            Variant::PpoClip => (0.2, 0.2, Aggregation::TokenLevel, 0.0),
            Variant::PpoPenalty => (0.2, 0.2, Aggregation::TokenLevel, 0.1),
            Variant::Grpo => (0.2, 0.2, Aggregation::PerResponseMean, 0.0),
            Variant::Dapo => (0.2, 0.28, Aggregation::TokenLevel, 0.0),
            Variant::Gppo => (0.2, 0.2, Aggregation::TokenLevel, 0.0),
        };
        ObjectiveConfig {
            variant,
            eps_low,
            eps_high,
            beta_kl,
            alpha_entropy: 0.0,
            erc_enabled: false,
            beta_low: 0.05,
            beta_high: 0.05,
            aggregation,
            eps_h: DEFAULT_EPS_H,
        }
    }

    pub fn with_erc(mut self, beta_low: f64, beta_high: f64) -> Self {
        self.erc_enabled = true;
        self.beta_low = beta_low;
        self.beta_high = beta_high;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("eps_low", self.eps_low),
            ("eps_high", self.eps_high),
            ("beta_kl", self.beta_kl),
            ("alpha_entropy", self.alpha_entropy),
            ("beta_low", self.beta_low),
            ("beta_high", self.beta_high),
            ("eps_h", self.eps_h),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ErcError::domain(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.eps_low >= 1.0 {
            return Err(ErcError::domain("eps_low must be < 1"));
        }
        if self.beta_low >= 1.0 {
            return Err(ErcError::domain("beta_low must be < 1"));
        }
        Ok(())
    }

    fn uses_kl(&self) -> bool {
        self.variant == Variant::PpoPenalty && self.beta_kl > 0.0
    }
}

pub fn importance_ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).exp()
}

pub fn entropy_ratio(new_entropy: f64, old_entropy: f64, eps_h: f64) -> f64 {
    new_entropy / old_entropy.max(eps_h)
}

/// 1 iff `1 - beta_low < rho < 1 + beta_high`.
pub fn erc_mask(rho: f64, beta_low: f64, beta_high: f64) -> u8 {
    u8::from(1.0 - beta_low < rho && rho < 1.0 + beta_high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErcSide {
    None,
    Upper,
    Lower,
}

impl ErcSide {
    pub fn of(rho: f64, beta_low: f64, beta_high: f64) -> Self {
        if rho >= 1.0 + beta_high {
            ErcSide::Upper
        } else if rho <= 1.0 - beta_low {
            ErcSide::Lower
        } else {
            ErcSide::None
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErcSide::None => "none",
            ErcSide::Upper => "upper",
            ErcSide::Lower => "lower",
        }
    }
}

/// Value of one token's surrogate, its derivative in the ratio, and whether
/// the clipped branch was the one selected by the min.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    pub dvalue_dratio: f64,
    pub clipped: bool,
}

pub fn surrogate_term(config: &ObjectiveConfig, ratio: f64, advantage: f64) -> Surrogate {
    if !config.variant.clips() {
        return Surrogate { value: ratio * advantage, dvalue_dratio: advantage, clipped: false };
    }
    let lo = 1.0 - config.eps_low;
    let hi = 1.0 + config.eps_high;
    let unclipped = ratio * advantage;
    let clipped_value = ratio.clamp(lo, hi) * advantage;
    let value = unclipped.min(clipped_value);
    // Closed comparison: landing exactly on a bound selects the clipped branch.
    let upper = advantage > 0.0 && ratio >= hi;
    let lower = advantage < 0.0 && ratio <= lo;
    let dvalue_dratio = match (config.variant, upper, lower) {
        (_, false, false) => advantage,
        // sg(r) is a constant, so d/dr [bound / sg(r) * r * A] = bound / r * A.
        (Variant::Gppo, true, _) => advantage * hi / ratio,
        (Variant::Gppo, _, true) => advantage * lo / ratio,
        _ => 0.0,
    };
    Surrogate { value, dvalue_dratio, clipped: upper || lower }
}

/// Per-token diagnostics from a batch evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEval {
    pub group: usize,
    pub response: usize,
    pub position: usize,
    pub token: TokenId,
    pub advantage: f64,
    pub ratio: f64,
    pub old_prob: f64,
    pub new_prob: f64,
    pub old_entropy: f64,
    pub new_entropy: f64,
    pub entropy_ratio: f64,
    pub erc_mask: u8,
    pub erc_side: ErcSide,
    pub is_clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub token_evals: Vec<TokenEval>,
}

impl BatchObjective {
    pub fn mean_new_entropy(&self) -> f64 {
        mean(self.token_evals.iter().map(|e| e.new_entropy))
    }
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

/// Sparse per-row gradient contributions of one group, applied in order.
struct GroupPart {
    objective: f64,
    rows: Vec<(usize, f64, Vec<f64>)>,
    evals: Vec<TokenEval>,
}

pub fn batch_objective(
    config: &ObjectiveConfig,
    groups: &[PromptGroup],
    new: &PolicyParams,
    old: &PolicyParams,
) -> Result<BatchObjective> {
    batch_objective_with(config, groups, new, old, Execution::Sequential)
}

/// Evaluate the objective, fanning groups out per `exec`. Partial results
/// are reduced in group order, so every mode yields identical bits.
pub fn batch_objective_with(
    config: &ObjectiveConfig,
    groups: &[PromptGroup],
    new: &PolicyParams,
    old: &PolicyParams,
    exec: Execution,
) -> Result<BatchObjective> {
    config.validate()?;
    if new.shape() != old.shape() {
        return Err(ErcError::domain("new and old policies differ in shape"));
    }
    let live: Vec<&PromptGroup> = groups.iter().filter(|g| !g.filtered).collect();
    let responses: usize = live.iter().map(|g| g.trajectories.len()).sum();
    let tokens: usize = live.iter().map(|g| g.token_count()).sum();
    if live.is_empty() || tokens == 0 {
        return Err(ErcError::EmptyBatch);
    }
    let indices: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.filtered)
        .map(|(i, _)| i)
        .collect();
    let ctx = EvalContext { config, new, old, responses, tokens };
    let parts = parallel::map(exec, &indices, |_, &gi| ctx.group(gi, &groups[gi]));

    let v = new.vocab().size();
    let mut objective = 0.0;
    let mut gradient = vec![0.0; new.weights().len()];
    let mut token_evals = Vec::with_capacity(tokens);
    for part in parts {
        let part = part?;
        objective += part.objective;
        for (row, x, dlogits) in &part.rows {
            scatter_rows(&mut gradient, v, &[(*row, *x)], dlogits, 1.0);
        }
        token_evals.extend(part.evals);
    }
    Ok(BatchObjective { objective, gradient, token_evals })
}

struct EvalContext<'a> {
    config: &'a ObjectiveConfig,
    new: &'a PolicyParams,
    old: &'a PolicyParams,
    responses: usize,
    tokens: usize,
}

impl EvalContext<'_> {
    fn group(&self, gi: usize, group: &PromptGroup) -> Result<GroupPart> {
        let cfg = self.config;
        let n_tok = self.tokens as f64;
        let mut part = GroupPart { objective: 0.0, rows: Vec::new(), evals: Vec::new() };
        for (ri, traj) in group.trajectories.iter().enumerate() {
            if traj.tokens.is_empty() {
                continue;
            }
            let weight = match cfg.aggregation {
                Aggregation::TokenLevel => 1.0 / n_tok,
                Aggregation::PerResponseMean => 1.0 / (self.responses as f64 * traj.len() as f64),
            };
            let adv = group.advantages[ri];
            for (t, &tok) in traj.tokens.iter().enumerate() {
                let prefix = &traj.tokens[..t];
                let (dist, feats) = self.new.forward_with_features(&traj.prompt, prefix)?;
                let old_lp = traj.old_logprobs[t];
                let old_h = traj.old_entropies[t];
                let ratio = importance_ratio(dist.logprobs[tok], old_lp);
                let rho = entropy_ratio(dist.entropy, old_h, cfg.eps_h);
                let (mask, side) = if cfg.erc_enabled {
                    (erc_mask(rho, cfg.beta_low, cfg.beta_high), ErcSide::of(rho, cfg.beta_low, cfg.beta_high))
                } else {
                    (1, ErcSide::None)
                };
                let s = surrogate_term(cfg, ratio, adv);

                let mut dlogits = vec![0.0; dist.len()];
                let mut touched = false;
                if mask == 1 {
                    part.objective += weight * s.value;
                    // d ratio / d logits = ratio * d log p / d logits
                    let scale = weight * s.dvalue_dratio * ratio;
                    if scale != 0.0 {
                        for (d, g) in dlogits.iter_mut().zip(dist.logprob_dlogits(tok)) {
                            *d += scale * g;
                        }
                        touched = true;
                    }
                }
                if cfg.uses_kl() {
                    let old_dist = self.old.forward(&traj.prompt, prefix)?;
                    part.objective -= cfg.beta_kl / n_tok * dist.kl_from(&old_dist);
                    // d/dz KL(old || new) = p_new - p_old
                    for ((d, pn), po) in dlogits.iter_mut().zip(&dist.probs).zip(&old_dist.probs) {
                        *d -= cfg.beta_kl / n_tok * (pn - po);
                    }
                    touched = true;
                }
                if cfg.alpha_entropy > 0.0 {
                    part.objective += cfg.alpha_entropy / n_tok * dist.entropy;
                    for (d, g) in dlogits.iter_mut().zip(dist.entropy_dlogits()) {
                        *d += cfg.alpha_entropy / n_tok * g;
                    }
                    touched = true;
                }
                if touched {
                    part.rows.extend(feats.iter().map(|&(row, x)| (row, x, dlogits.clone())));
                }
                part.evals.push(TokenEval {
                    group: gi,
                    response: ri,
                    position: t,
                    token: tok,
                    advantage: adv,
                    ratio,
                    old_prob: old_lp.exp(),
                    new_prob: dist.probs[tok],
                    old_entropy: old_h,
                    new_entropy: dist.entropy,
                    entropy_ratio: rho,
                    erc_mask: mask,
                    erc_side: side,
                    is_clipped: s.clipped,
                });
            }
        }
        Ok(part)
    }
}
