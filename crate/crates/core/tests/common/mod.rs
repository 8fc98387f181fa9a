#![allow(dead_code)]

pub mod oracle;

use erc_core::{
    standardize_advantages, ObjectiveConfig, PolicyParams, PolicyShape, PromptGroup, TrajectoryRecord,
    Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Both backends over a vocabulary of `v`.
pub fn shapes(v: usize) -> [PolicyShape; 2] {
    let vocab = Vocab::new(v).unwrap();
    [PolicyShape::tabular(vocab, 1, 3), PolicyShape::linear(vocab, 2)]
}

pub fn random_policy(shape: PolicyShape, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let w = (0..shape.weight_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyParams::from_weights(shape, w).unwrap()
}

/// `base` with every weight moved by up to `scale`.
pub fn perturbed(base: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let w = base.weights().iter().map(|x| x + rng.gen_range(-scale..scale)).collect();
    PolicyParams::from_weights(*base.shape(), w).unwrap()
}

/// A group of `g` responses of length 1..=max_len scored by `old`, with
/// rewards chosen so the group is never filtered.
pub fn random_group(old: &PolicyParams, g: usize, max_len: usize, rng: &mut ChaCha8Rng) -> PromptGroup {
    let v = old.vocab().size();
    let prompt: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..v)).collect();
    let trajectories = (0..g)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..v)).collect();
            let mut old_logprobs = Vec::new();
            let mut old_entropies = Vec::new();
            for t in 0..len {
                let d = old.forward(&prompt, &tokens[..t]).unwrap();
                old_logprobs.push(d.logprobs[tokens[t]]);
                old_entropies.push(d.entropy);
            }
            let reward = if i == 0 { 1.0 } else if i == 1 { 0.0 } else { f64::from(rng.gen_range(0..2u8)) };
            TrajectoryRecord { prompt: prompt.clone(), tokens, old_logprobs, old_entropies, reward }
        })
        .collect();
    standardize_advantages(PromptGroup::new(prompt, trajectories).unwrap(), 1e-8)
}

pub fn with_erc(mut cfg: ObjectiveConfig, on: bool) -> ObjectiveConfig {
    cfg.erc_enabled = on;
    cfg
}
