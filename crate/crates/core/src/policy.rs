//! Autoregressive softmax policies over a small abstract vocabulary.
//!
//! Both backends compute logits as a sparse linear map of context features:
//!
//! ```text
//! logits[a] = sum_f x_f * W[f, a]
//! ```
//!
//! For `tabular-context` there is exactly one active row (the context key,
//! value 1). For `linear-softmax` the active rows are the prompt's
//! bag-of-tokens counts followed by one-hot slots for the last `k` prefix
//! tokens. Gradients of any function of the logits therefore reduce to
//! `dL/dW[f, :] = x_f * dL/dlogits`, which is how every analytic gradient in
//! this crate is assembled.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ErcError, Result};
use crate::seed;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Header line of the parameter snapshot format.
pub const SNAPSHOT_MAGIC: &str = "erc-policy v1";

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: TokenId,
}

impl Vocab {
    /// Vocabulary whose last id is the end-of-sequence token.
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(ErcError::domain(format!("vocab size must be >= 2, got {size}")));
        }
        Ok(Vocab { size, eos: size - 1 })
    }

    pub fn with_eos(size: usize, eos: TokenId) -> Result<Self> {
        let v = Vocab::new(size)?;
        if eos >= size {
            return Err(ErcError::domain(format!("eos id {eos} out of range for vocab {size}")));
        }
        Ok(Vocab { eos, ..v })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(ErcError::domain(format!(
                "token id {t} out of range for vocab {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    TabularContext,
    LinearSoftmax,
}

impl Backend {
    pub fn tag(self) -> &'static str {
        match self {
            Backend::TabularContext => "tabular-context",
            Backend::LinearSoftmax => "linear-softmax",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Backend {
    type Err = ErcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular-context" | "tabular" => Ok(Backend::TabularContext),
            "linear-softmax" | "linear" => Ok(Backend::LinearSoftmax),
            other => Err(ErcError::domain(format!("unknown backend `{other}`"))),
        }
    }
}

/// Shape of a policy: everything except the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub backend: Backend,
    pub vocab: Vocab,
    pub context_window: usize,
    /// Number of prompt hash buckets (tabular backend only; ignored otherwise).
    pub prompt_buckets: usize,
}

impl PolicyShape {
    pub fn tabular(vocab: Vocab, context_window: usize, prompt_buckets: usize) -> Self {
        PolicyShape { backend: Backend::TabularContext, vocab, context_window, prompt_buckets }
    }

    pub fn linear(vocab: Vocab, context_window: usize) -> Self {
        PolicyShape { backend: Backend::LinearSoftmax, vocab, context_window, prompt_buckets: 0 }
    }

    /// Number of feature rows of the `[rows x vocab]` weight matrix.
    pub fn rows(&self) -> usize {
        let v = self.vocab.size();
        match self.backend {
            Backend::TabularContext => {
                self.prompt_buckets * (v + 1).pow(self.context_window as u32)
            }
            Backend::LinearSoftmax => self.context_window * v + v,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.rows() * self.vocab.size()
    }

    fn validate(&self) -> Result<()> {
        if self.backend == Backend::TabularContext && self.prompt_buckets == 0 {
            return Err(ErcError::domain("tabular backend needs at least one prompt bucket"));
        }
        Ok(())
    }

    /// Active feature rows for a context, in a fixed order.
    pub fn features(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<(usize, f64)>> {
        self.vocab.check(prompt)?;
        self.vocab.check(prefix)?;
        let v = self.vocab.size();
        let k = self.context_window;
        match self.backend {
            Backend::TabularContext => {
                let bucket = (prompt_hash(prompt) % self.prompt_buckets as u64) as usize;
                // Left-padded with the pad symbol `v`.
                let code = (0..k).fold(0usize, |code, i| {
                    let tok = (prefix.len() + i).checked_sub(k).map_or(v, |j| prefix[j]);
                    code * (v + 1) + tok
                });
                Ok(vec![(bucket * (v + 1).pow(k as u32) + code, 1.0)])
            }
            Backend::LinearSoftmax => {
                let mut counts = vec![0usize; v];
                for &t in prompt {
                    counts[t] += 1;
                }
                let mut feats: Vec<(usize, f64)> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(a, &c)| (a, c as f64))
                    .collect();
                // Slot 0 is the most recent prefix token.
                for (slot, &t) in prefix.iter().rev().take(k).enumerate() {
                    feats.push((v + slot * v + t, 1.0));
                }
                Ok(feats)
            }
        }
    }
}

/// Hash of a prompt used to pick the tabular context bucket.
pub fn prompt_hash(prompt: &[TokenId]) -> u64 {
    let bytes: Vec<u8> = prompt.iter().flat_map(|&t| (t as u32).to_le_bytes()).collect();
    seed::fnv1a(&bytes)
}

/// A distribution over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub logprobs: Vec<f64>,
    /// Entropy in nats.
    pub entropy: f64,
}

impl TokenDistribution {
    /// Softmax of `logits`. Entries equal to negative infinity get
    /// probability zero and the floored log-probability.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let floor = PROB_FLOOR.ln();
        let probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
        let logprobs: Vec<f64> = logits.iter().map(|&z| (z - lse).max(floor)).collect();
        Self::assemble(probs, logprobs)
    }

    /// Distribution from explicit probabilities (renormalized).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(ErcError::domain("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(ErcError::domain("probabilities sum to zero"));
        }
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let logprobs = probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
        Ok(Self::assemble(probs, logprobs))
    }

    fn assemble(probs: Vec<f64>, logprobs: Vec<f64>) -> Self {
        let entropy = -probs.iter().zip(&logprobs).map(|(p, l)| p * l).sum::<f64>();
        TokenDistribution { probs, logprobs, entropy: entropy.max(0.0) }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// d log p[token] / d logits.
    pub fn logprob_dlogits(&self, token: TokenId) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[token] += 1.0;
        g
    }

    /// d entropy / d logits = -p_j (log p_j + H).
    pub fn entropy_dlogits(&self) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.logprobs)
            .map(|(p, l)| -p * (l + self.entropy))
            .collect()
    }

    /// KL(other || self) over the full vocabulary.
    pub fn kl_from(&self, other: &TokenDistribution) -> f64 {
        other
            .probs
            .iter()
            .zip(&other.logprobs)
            .zip(&self.logprobs)
            .map(|((p, lp), lq)| p * (lp - lq))
            .sum::<f64>()
            .max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        Ok(PolicyParams { shape, weights: vec![0.0; shape.weight_count()] })
    }

    /// Weights i.i.d. uniform on `[-scale, scale]` from the seeded init stream.
    pub fn init(shape: PolicyShape, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        if scale > 0.0 {
            let mut rng = seed::rng(seed, "policy-init", &[]);
            for w in &mut p.weights {
                *w = rng.gen_range(-scale..=scale);
            }
        }
        Ok(p)
    }

    pub fn from_weights(shape: PolicyShape, weights: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.weight_count() {
            return Err(ErcError::domain(format!(
                "expected {} weights for {} policy, got {}",
                shape.weight_count(),
                shape.backend,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ErcError::domain("weights must be finite"));
        }
        Ok(PolicyParams { shape, weights })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn vocab(&self) -> Vocab {
        self.shape.vocab
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn logits(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let v = self.shape.vocab.size();
        let mut z = vec![0.0; v];
        for &(row, x) in feats {
            for (zi, w) in z.iter_mut().zip(&self.weights[row * v..(row + 1) * v]) {
                *zi += x * w;
            }
        }
        z
    }

    pub fn forward(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<TokenDistribution> {
        let feats = self.shape.features(prompt, prefix)?;
        Ok(TokenDistribution::from_logits(&self.logits(&feats)))
    }

    /// Forward pass that also returns the active features, for callers that
    /// go on to assemble gradients.
    pub fn forward_with_features(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<(TokenDistribution, Vec<(usize, f64)>)> {
        let feats = self.shape.features(prompt, prefix)?;
        let dist = TokenDistribution::from_logits(&self.logits(&feats));
        Ok((dist, feats))
    }

    /// Dense gradient of `log pi(token | context)` with respect to the weights.
    pub fn logprob_grad(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        token: TokenId,
    ) -> Result<Vec<f64>> {
        self.shape.vocab.check(&[token])?;
        let (dist, feats) = self.forward_with_features(prompt, prefix)?;
        let mut g = vec![0.0; self.weights.len()];
        scatter_rows(&mut g, self.shape.vocab.size(), &feats, &dist.logprob_dlogits(token), 1.0);
        Ok(g)
    }

    /// Dense gradient of the step entropy with respect to the weights.
    pub fn entropy_grad(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let (dist, feats) = self.forward_with_features(prompt, prefix)?;
        let mut g = vec![0.0; self.weights.len()];
        scatter_rows(&mut g, self.shape.vocab.size(), &feats, &dist.entropy_dlogits(), 1.0);
        Ok(g)
    }

    /// Write the versioned text snapshot.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.shape;
        writeln!(out, "{SNAPSHOT_MAGIC}")?;
        writeln!(out, "backend {}", s.backend)?;
        writeln!(out, "vocab {}", s.vocab.size())?;
        writeln!(out, "eos {}", s.vocab.eos())?;
        writeln!(out, "context_window {}", s.context_window)?;
        writeln!(out, "prompt_buckets {}", s.prompt_buckets)?;
        writeln!(out, "weights {}", self.weights.len())?;
        for w in &self.weights {
            writeln!(out, "{w:?}")?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        let bad = |m: String| ErcError::Format { what: "policy snapshot", message: m };
        let mut lines = input.lines();
        let mut next = |name: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| bad(format!("missing {name}")))
        };
        if next("header")?.trim() != SNAPSHOT_MAGIC {
            return Err(bad("unsupported header".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next(key)?;
            match line.trim().split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(bad(format!("expected `{key}`, got `{line}`"))),
            }
        };
        let int = |s: String| s.parse::<usize>().map_err(|e| bad(e.to_string()));
        let backend: Backend = field("backend")?.parse()?;
        let size = int(field("vocab")?)?;
        let eos = int(field("eos")?)?;
        let context_window = int(field("context_window")?)?;
        let prompt_buckets = int(field("prompt_buckets")?)?;
        let count = int(field("weights")?)?;
        let shape = PolicyShape {
            backend,
            vocab: Vocab::with_eos(size, eos)?,
            context_window,
            prompt_buckets,
        };
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next("weight")?;
            weights.push(line.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        Self::from_weights(shape, weights)
    }
}

/// `grad[row, :] += scale * x_f * dlogits` for every active feature.
pub(crate) fn scatter_rows(
    grad: &mut [f64],
    vocab: usize,
    feats: &[(usize, f64)],
    dlogits: &[f64],
    scale: f64,
) {
    for &(row, x) in feats {
        for (g, d) in grad[row * vocab..(row + 1) * vocab].iter_mut().zip(dlogits) {
            *g += scale * x * d;
        }
    }
}
