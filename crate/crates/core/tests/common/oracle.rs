//! Finite-difference oracle for the batch objective. The objective is
//! rebuilt here from forward passes alone, with the mask and clip branch
//! frozen at the evaluation point.

use super::{perturbed, random_group, random_policy, rng, shapes};
use erc_core::{batch_objective, Aggregation, ObjectiveConfig, PolicyParams, PromptGroup, Variant};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 100;
/// Below this gradient norm central differences at `STEP` resolve nothing
/// but rounding error.
pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub enum Branch {
    /// Surrogate `r * A`.
    Linear,
    /// Clipped value, constant in the parameters.
    Flat(f64),
    /// `bound * A * r / r0`, the stop-gradient rescaling.
    Scaled { bound: f64, r0: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Frozen {
    keep: bool,
    branch: Branch,
}

pub fn freeze(cfg: &ObjectiveConfig, groups: &[PromptGroup], new: &PolicyParams) -> Vec<Frozen> {
    let clips = !matches!(cfg.variant, Variant::Pg | Variant::PpoPenalty);
    let (lo, hi) = (1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let mut out = Vec::new();
    for g in groups.iter().filter(|g| !g.filtered) {
        for (i, traj) in g.trajectories.iter().enumerate() {
            let a = g.advantages[i];
            for t in 0..traj.tokens.len() {
                let d = new.forward(&traj.prompt, &traj.tokens[..t]).unwrap();
                let r0 = (d.logprobs[traj.tokens[t]] - traj.old_logprobs[t]).exp();
                let rho = d.entropy / traj.old_entropies[t].max(cfg.eps_h);
                let keep = !cfg.erc_enabled || (1.0 - cfg.beta_low < rho && rho < 1.0 + cfg.beta_high);
                let bound = if clips && a > 0.0 && r0 >= hi {
                    Some(hi)
                } else if clips && a < 0.0 && r0 <= lo {
                    Some(lo)
                } else {
                    None
                };
                let branch = match bound {
                    None => Branch::Linear,
                    Some(b) if cfg.variant == Variant::Gppo => Branch::Scaled { bound: b, r0 },
                    Some(b) => Branch::Flat(b * a),
                };
                out.push(Frozen { keep, branch });
            }
        }
    }
    out
}

pub fn frozen_objective(
    cfg: &ObjectiveConfig,
    groups: &[PromptGroup],
    new: &PolicyParams,
    old: &PolicyParams,
    frozen: &[Frozen],
) -> f64 {
    let live: Vec<&PromptGroup> = groups.iter().filter(|g| !g.filtered).collect();
    let n: usize = live.iter().flat_map(|g| &g.trajectories).map(|t| t.tokens.len()).sum();
    let responses: usize = live.iter().map(|g| g.trajectories.len()).sum();
    let n = n as f64;
    let mut total = 0.0;
    let mut k = 0;
    for g in live {
        for (i, traj) in g.trajectories.iter().enumerate() {
            let a = g.advantages[i];
            let w = match cfg.aggregation {
                Aggregation::TokenLevel => 1.0 / n,
                Aggregation::PerResponseMean => 1.0 / (responses as f64 * traj.tokens.len() as f64),
            };
            for t in 0..traj.tokens.len() {
                let prefix = &traj.tokens[..t];
                let d = new.forward(&traj.prompt, prefix).unwrap();
                let r = (d.logprobs[traj.tokens[t]] - traj.old_logprobs[t]).exp();
                let f = frozen[k];
                k += 1;
                if f.keep {
                    total += w * match f.branch {
                        Branch::Linear => r * a,
                        Branch::Flat(v) => v,
                        Branch::Scaled { bound, r0 } => bound * a * r / r0,
                    };
                }
                if cfg.variant == Variant::PpoPenalty && cfg.beta_kl > 0.0 {
                    let o = old.forward(&traj.prompt, prefix).unwrap();
                    let kl: f64 = o
                        .probs
                        .iter()
                        .zip(o.logprobs.iter().zip(&d.logprobs))
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, (lo, ln))| p * (lo - ln))
                        .sum();
                    total -= cfg.beta_kl / n * kl;
                }
                total += cfg.alpha_entropy / n * d.entropy;
            }
        }
    }
    total
}

pub fn fd_gradient(f: impl Fn(&PolicyParams) -> f64, at: &PolicyParams) -> Vec<f64> {
    let mut p = at.clone();
    (0..at.weights().len())
        .map(|j| {
            let x = at.weights()[j];
            p.weights_mut()[j] = x + STEP;
            let up = f(&p);
            p.weights_mut()[j] = x - STEP;
            let down = f(&p);
            p.weights_mut()[j] = x;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(a).max(norm(b))
}

pub fn random_config(variant: Variant, rng: &mut rand_chacha::ChaCha8Rng) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::for_variant(variant);
    cfg.eps_low = rng.gen_range(0.05..0.4);
    cfg.eps_high = rng.gen_range(0.05..0.4);
    cfg.erc_enabled = rng.gen_bool(0.5);
    cfg.beta_low = rng.gen_range(0.02..0.3);
    cfg.beta_high = rng.gen_range(0.02..0.3);
    if rng.gen_bool(0.3) {
        cfg.alpha_entropy = rng.gen_range(0.0..0.2);
    }
    if variant == Variant::PpoPenalty {
        cfg.beta_kl = rng.gen_range(0.01..0.5);
    }
    if rng.gen_bool(0.5) {
        cfg.aggregation = Aggregation::PerResponseMean;
    }
    cfg
}

/// Worst relative error over the instances of one variant and backend.
pub fn worst_case(variant: Variant, backend: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut clipped_tokens = 0;
    let mut checked = 0;
    let mut inst = 0u64;
    while checked < INSTANCES {
        inst += 1;
        let mut r = rng(inst * 31 + variant as u64 * 7 + backend as u64 * 1000);
        let v = r.gen_range(2..=5);
        let shape = shapes(v)[backend];
        let old = random_policy(shape, 1.0, &mut r);
        let new = perturbed(&old, 0.6, &mut r);
        let cfg = random_config(variant, &mut r);
        let groups: Vec<PromptGroup> = (0..r.gen_range(1..=2)).map(|_| random_group(&old, 2, 3, &mut r)).collect();

        let analytic = batch_objective(&cfg, &groups, &new, &old).unwrap();
        let frozen = freeze(&cfg, &groups, &new);
        clipped_tokens += analytic.token_evals.iter().filter(|e| e.is_clipped || e.erc_mask == 0).count();
        let value = frozen_objective(&cfg, &groups, &new, &old, &frozen);
        assert!(
            (value - analytic.objective).abs() < 1e-12,
            "{variant} backend {backend} instance {inst}: value {value} vs {}",
            analytic.objective
        );
        let fd = fd_gradient(|p| frozen_objective(&cfg, &groups, p, &old, &frozen), &new);
        let scale = norm(&analytic.gradient).max(norm(&fd));
        if scale < NOISE_FLOOR {
            // Masked, flat-clipped or cancelling terms: both sides are zero
            // up to rounding, so the instance says nothing about the match.
            continue;
        }
        worst = worst.max(norm(&sub(&analytic.gradient, &fd)) / scale);
        checked += 1;
    }
    (worst, clipped_tokens)
}

