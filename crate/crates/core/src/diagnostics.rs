//! Analyses over token-level evaluation dumps.
//!
//! Every analysis is a pure function of its input records. A token is
//! "masked" when the entropy-ratio mask removed it (`erc_mask == 0`).
//! Tabular outputs are CSV with a header row; floats carry 9 significant
//! digits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{ErcError, Result};
use crate::objectives::{entropy_ratio, erc_mask, surrogate_term, ErcSide, ObjectiveConfig, TokenEval};
use crate::policy::{TokenDistribution, TokenId};
use crate::seed;
use crate::trainer::StepMetrics;

pub const ENTROPY_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvantageSign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "0")]
    Zero,
}

impl AdvantageSign {
    pub fn of(advantage: f64) -> Self {
        if advantage > 0.0 {
            AdvantageSign::Positive
        } else if advantage < 0.0 {
            AdvantageSign::Negative
        } else {
            AdvantageSign::Zero
        }
    }
}

/// One sampled token as seen by one mini-batch update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDumpRecord {
    pub step: usize,
    pub mini_batch: usize,
    pub token_id: TokenId,
    pub advantage: f64,
    pub advantage_sign: AdvantageSign,
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

impl TokenDumpRecord {
    pub fn from_eval(step: usize, mini_batch: usize, e: &TokenEval) -> Self {
        TokenDumpRecord {
            step,
            mini_batch,
            token_id: e.token,
            advantage: e.advantage,
            advantage_sign: AdvantageSign::of(e.advantage),
            ratio: e.ratio,
            old_prob: e.old_prob,
            new_prob: e.new_prob,
            old_entropy: e.old_entropy,
            new_entropy: e.new_entropy,
            entropy_ratio: e.entropy_ratio,
            erc_mask: e.erc_mask,
            erc_side: e.erc_side,
            is_clipped: e.is_clipped,
        }
    }

    /// Build a record for `token` from explicit old and new next-token
    /// distributions, scored under `cfg` with the entropy mask always applied.
    pub fn evaluate(
        cfg: &ObjectiveConfig,
        old: &TokenDistribution,
        new: &TokenDistribution,
        token: TokenId,
        advantage: f64,
    ) -> Result<Self> {
        if old.len() != new.len() || token >= old.len() {
            return Err(ErcError::domain("token outside the distributions"));
        }
        let ratio = (new.logprobs[token] - old.logprobs[token]).exp();
        let rho = entropy_ratio(new.entropy, old.entropy, cfg.eps_h);
        Ok(TokenDumpRecord {
            step: 0,
            mini_batch: 0,
            token_id: token,
            advantage,
            advantage_sign: AdvantageSign::of(advantage),
            ratio,
            old_prob: old.probs[token],
            new_prob: new.probs[token],
            old_entropy: old.entropy,
            new_entropy: new.entropy,
            entropy_ratio: rho,
            erc_mask: erc_mask(rho, cfg.beta_low, cfg.beta_high),
            erc_side: ErcSide::of(rho, cfg.beta_low, cfg.beta_high),
            is_clipped: surrogate_term(cfg, ratio, advantage).clipped,
        })
    }

    pub fn masked(&self) -> bool {
        self.erc_mask == 0
    }
}

pub fn write_dump<W: Write>(mut out: W, records: &[TokenDumpRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<TokenDumpRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| ErcError::Format {
            what: "token dump",
            message: format!("line {}: {e}", i + 1),
        })?;
        records.push(r);
    }
    Ok(records)
}

/// Keep `n` records chosen uniformly without replacement, in their
/// original order. Returns everything when `n` covers the input.
pub fn subsample(records: &[TokenDumpRecord], n: usize, subsample_seed: u64) -> Vec<TokenDumpRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = seed::rng(subsample_seed, "subsample", &[]);
    let mut picked = index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

fn non_empty(records: &[TokenDumpRecord]) -> Result<()> {
    if records.is_empty() {
        Err(ErcError::EmptyInput("token dump records"))
    } else {
        Ok(())
    }
}

/// Format with 9 significant digits.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..=15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

/// A header plus rows of already-formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.header.join(","))?;
        for row in &self.rows {
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRatioPoint {
    pub old_prob: f64,
    pub entropy_ratio: f64,
    pub erc_side: ErcSide,
}

pub fn scatter_entropy_ratio_vs_old_prob(records: &[TokenDumpRecord]) -> Result<Vec<EntropyRatioPoint>> {
    non_empty(records)?;
    Ok(records
        .iter()
        .map(|r| EntropyRatioPoint { old_prob: r.old_prob, entropy_ratio: r.entropy_ratio, erc_side: r.erc_side })
        .collect())
}

pub fn entropy_ratio_table(points: &[EntropyRatioPoint]) -> Table {
    let mut t = Table::new(&["old_prob", "entropy_ratio", "erc_side"]);
    t.rows = points
        .iter()
        .map(|p| vec![sig9(p.old_prob), sig9(p.entropy_ratio), p.erc_side.tag().to_string()])
        .collect();
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionPoint {
    pub old_prob: f64,
    pub new_prob: f64,
    pub erc_side: ErcSide,
    pub is_clipped: bool,
}

pub fn scatter_trust_region(records: &[TokenDumpRecord]) -> Result<Vec<TrustRegionPoint>> {
    non_empty(records)?;
    Ok(records
        .iter()
        .map(|r| TrustRegionPoint {
            old_prob: r.old_prob,
            new_prob: r.new_prob,
            erc_side: r.erc_side,
            is_clipped: r.is_clipped,
        })
        .collect())
}

pub fn trust_region_table(points: &[TrustRegionPoint]) -> Table {
    let mut t = Table::new(&["old_prob", "new_prob", "erc_side", "is_clipped"]);
    t.rows = points
        .iter()
        .map(|p| {
            vec![
                sig9(p.old_prob),
                sig9(p.new_prob),
                p.erc_side.tag().to_string(),
                u8::from(p.is_clipped).to_string(),
            ]
        })
        .collect();
    t
}

/// A token-suppression mechanism whose clip fraction can be tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mechanism {
    /// The importance-ratio clip selected the clipped branch.
    PpoClip,
    /// The entropy-ratio mask removed the token.
    Erc,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::PpoClip, Mechanism::Erc];

    pub fn tag(self) -> &'static str {
        match self {
            Mechanism::PpoClip => "ppo-clip",
            Mechanism::Erc => "erc",
        }
    }

    fn hits(self, r: &TokenDumpRecord) -> bool {
        match self {
            Mechanism::PpoClip => r.is_clipped,
            Mechanism::Erc => r.masked(),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Mechanism {
    type Err = ErcError;
    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| ErcError::domain(format!("unknown clip mechanism `{s}` (expected ppo-clip or erc)")))
    }
}

pub fn clip_ratio_table(records: &[TokenDumpRecord], mechanisms: &[Mechanism]) -> Result<Vec<(Mechanism, f64)>> {
    non_empty(records)?;
    let n = records.len() as f64;
    Ok(mechanisms
        .iter()
        .map(|&m| (m, records.iter().filter(|r| m.hits(r)).count() as f64 / n))
        .collect())
}

pub fn clip_ratio_csv(rows: &[(Mechanism, f64)]) -> Table {
    let mut t = Table::new(&["mechanism", "clip_fraction"]);
    t.rows = rows.iter().map(|(m, f)| vec![m.tag().to_string(), sig9(*f)]).collect();
    t
}

/// Old-entropy histograms of masked and unmasked tokens on shared bins.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    /// `ENTROPY_BINS + 1` edges from 0 to ln(vocab).
    pub edges: Vec<f64>,
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
}

impl EntropyProfile {
    pub fn total(&self) -> usize {
        self.masked.iter().chain(&self.unmasked).sum()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["bin", "entropy_lo", "entropy_hi", "masked", "unmasked"]);
        t.rows = (0..self.masked.len())
            .map(|b| {
                vec![
                    b.to_string(),
                    sig9(self.edges[b]),
                    sig9(self.edges[b + 1]),
                    self.masked[b].to_string(),
                    self.unmasked[b].to_string(),
                ]
            })
            .collect();
        t
    }
}

/// Bin old entropies uniformly over `[0, ln vocab]`. Values outside the range
/// fall into the nearest end bin.
pub fn clipped_token_entropy_profile(records: &[TokenDumpRecord], vocab: usize) -> Result<EntropyProfile> {
    non_empty(records)?;
    if vocab < 2 {
        return Err(ErcError::domain("entropy profile needs a vocabulary of at least 2"));
    }
    let top = (vocab as f64).ln();
    let width = top / ENTROPY_BINS as f64;
    let edges = (0..=ENTROPY_BINS).map(|i| i as f64 * width).collect();
    let mut masked = vec![0; ENTROPY_BINS];
    let mut unmasked = vec![0; ENTROPY_BINS];
    for r in records {
        let b = ((r.old_entropy / width).floor().max(0.0) as usize).min(ENTROPY_BINS - 1);
        if r.masked() {
            masked[b] += 1;
        } else {
            unmasked[b] += 1;
        }
    }
    Ok(EntropyProfile { edges, masked, unmasked })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrequencies {
    pub masked: Vec<(TokenId, usize)>,
    pub unmasked: Vec<(TokenId, usize)>,
}

impl TokenFrequencies {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["subset", "rank", "token_id", "count"]);
        for (name, list) in [("masked", &self.masked), ("unmasked", &self.unmasked)] {
            for (rank, (tok, count)) in list.iter().enumerate() {
                t.rows.push(vec![name.to_string(), (rank + 1).to_string(), tok.to_string(), count.to_string()]);
            }
        }
        t
    }
}

pub fn token_frequency_table(records: &[TokenDumpRecord], top_n: usize) -> Result<TokenFrequencies> {
    if top_n == 0 {
        return Err(ErcError::domain("top_n must be at least 1"));
    }
    let rank = |want_masked: bool| {
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        for r in records.iter().filter(|r| r.masked() == want_masked) {
            *counts.entry(r.token_id).or_default() += 1;
        }
        let mut list: Vec<_> = counts.into_iter().collect();
        // Stable sort over ascending ids keeps ties in id order.
        list.sort_by_key(|e| std::cmp::Reverse(e.1));
        list.truncate(top_n);
        list
    };
    Ok(TokenFrequencies { masked: rank(true), unmasked: rank(false) })
}

/// Run-level numbers used to compare runs in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    /// Mean reward of the first step's rollouts.
    pub initial_reward: f64,
    /// Mean reward over the last twentieth of the steps (at least one).
    pub final_reward: f64,
    /// Population std of per-update mean entropy over the second half of
    /// the steps.
    pub entropy_std_final_half: f64,
    pub grad_norm_max: f64,
    pub mean_is_clip_fraction: f64,
    pub mean_erc_clip_fraction: f64,
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

impl RunSummary {
    /// Summarize per-update metrics of a run with `steps` steps. Updates
    /// that saw no tokens only contribute to the reward figures.
    pub fn from_metrics(metrics: &[StepMetrics], steps: usize) -> Result<Self> {
        if metrics.is_empty() {
            return Err(ErcError::EmptyInput("step metrics"));
        }
        let first = metrics[0].step;
        let window = (steps / 20).max(1);
        let last_from = steps.saturating_sub(window);
        let half = steps / 2;
        let updates: Vec<&StepMetrics> = metrics.iter().filter(|m| m.tokens > 0).collect();
        let late_entropy: Vec<f64> = updates.iter().filter(|m| m.step >= half).map(|m| m.mean_entropy).collect();
        let mut late_reward = metrics.iter().filter(|m| m.step >= last_from).peekable();
        let final_reward = if late_reward.peek().is_some() {
            mean(late_reward.map(|m| m.mean_reward))
        } else {
            let last = metrics[metrics.len() - 1].step;
            mean(metrics.iter().filter(|m| m.step == last).map(|m| m.mean_reward))
        };
        Ok(RunSummary {
            initial_reward: mean(metrics.iter().filter(|m| m.step == first).map(|m| m.mean_reward)),
            final_reward,
            entropy_std_final_half: population_std(&late_entropy),
            grad_norm_max: updates.iter().map(|m| m.grad_norm).fold(0.0, f64::max),
            mean_is_clip_fraction: mean(updates.iter().map(|m| m.is_clip_fraction)),
            mean_erc_clip_fraction: mean(updates.iter().map(|m| m.erc_clip_fraction)),
        })
    }
}

/// Run metadata written next to analysis outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub record_count: usize,
    pub subsample_seed: Option<u64>,
    pub analyses: Vec<String>,
}

impl Manifest {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
