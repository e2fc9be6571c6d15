//! Seeded oracle-agreement checks: integrated-gradients rankings against the
//! brute-force ablation oracle, and suppression asymmetry, over randomized
//! planted toy models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::suppression_experiment;
use crate::attribution::{attribute_prompt, AttributionConfig};
use crate::error::Result;
use crate::model::{MaskedLm, TokenizedPrompt};
use crate::results::CheckOut;
use crate::selection::{NeuronRef, NeuronSet};
use crate::toy::{brute_force_ranking, PlantedNeuron, ToyModel, ToyModelSpec};

const IG_STEPS: usize = 8;
const SUPPRESSION_TRIALS: usize = 50;

/// A randomized planted toy plus a prompt that fires every planted trigger.
pub struct RandomToy {
    pub model: ToyModel,
    pub prompt: TokenizedPrompt,
    pub planted: Vec<NeuronRef>,
}

/// Deterministic in (seed, n_planted): dimensions, trigger tokens, planted
/// positions, and strengths all derive from one stream.
pub fn random_planted_toy(seed: u64, n_planted: usize) -> Result<RandomToy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let layer_count = rng.gen_range(2..=4usize);
    let dim = rng.gen_range(8..=24usize);
    let vocab = rng.gen_range(10..=16usize);
    let value_token = rng.gen_range(2..vocab as u32);

    let mut positions: Vec<(usize, usize)> = Vec::new();
    while positions.len() < n_planted {
        let pos = (rng.gen_range(0..layer_count), rng.gen_range(0..dim));
        if !positions.contains(&pos) {
            positions.push(pos);
        }
    }

    let mut planted = Vec::with_capacity(n_planted);
    let mut trigger_union: Vec<u32> = Vec::new();
    for &(layer, index) in &positions {
        let n_trigger = rng.gen_range(1..=3usize);
        let mut trigger: Vec<u32> = Vec::new();
        while trigger.len() < n_trigger {
            let t = rng.gen_range(2..vocab as u32);
            if !trigger.contains(&t) {
                trigger.push(t);
            }
        }
        for &t in &trigger {
            if !trigger_union.contains(&t) {
                trigger_union.push(t);
            }
        }
        planted.push(PlantedNeuron {
            layer,
            index,
            trigger,
            value_token,
            strength: rng.gen_range(0.5..4.0),
        });
    }
    trigger_union.sort_unstable();

    let spec = ToyModelSpec {
        layer_count,
        intermediate_dim: dim,
        vocab_size: vocab,
        planted: planted.clone(),
        seed,
        noise_magnitude: 1e-3,
        vocab: None,
    };
    let model = ToyModel::build(&spec)?;

    let letter = |id: u32| ((b'a' + (id - 2) as u8) as char).to_string();
    let mut words: Vec<String> = trigger_union.iter().map(|&t| letter(t)).collect();
    words.push("[MASK]".to_string());
    let prompt = model.tokenize(&words.join(" "), &letter(value_token))?;

    Ok(RandomToy {
        model,
        prompt,
        planted: positions
            .into_iter()
            .map(|(layer, index)| NeuronRef { layer, index })
            .collect(),
    })
}

/// Top-1 agreement between the attribution argmax and the ablation oracle on
/// single-planted toys. Returns (hits, seeds).
pub fn top1_agreement(seeds: usize) -> Result<(usize, usize)> {
    let mut hits = 0;
    for seed in 0..seeds as u64 {
        let toy = random_planted_toy(seed, 1)?;
        let map = attribute_prompt(
            &toy.model,
            &toy.prompt,
            "toy",
            &AttributionConfig::with_steps(IG_STEPS),
        )?;
        let ig_top = map.argmax().map(|(n, _)| n);
        let ablation_top = brute_force_ranking(&toy.model, &toy.prompt)?.top();
        if ig_top.is_some() && ig_top == ablation_top {
            hits += 1;
        }
    }
    Ok((hits, seeds))
}

/// Mean Jaccard overlap between the attribution top-10 and the ablation
/// top-10 on three-planted toys.
pub fn top10_jaccard(seeds: usize) -> Result<f64> {
    let mut total = 0.0;
    for seed in 0..seeds as u64 {
        let toy = random_planted_toy(seed, 3)?;
        let map = attribute_prompt(
            &toy.model,
            &toy.prompt,
            "toy",
            &AttributionConfig::with_steps(IG_STEPS),
        )?;
        let ig: NeuronSet = map
            .top_k_by_magnitude(10)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let ablation: NeuronSet = brute_force_ranking(&toy.model, &toy.prompt)?
            .top_k(10)
            .into_iter()
            .collect();
        total += crate::analysis::overlap(&ig, &ablation);
    }
    Ok(total / seeds as f64)
}

/// Zeroing the planted neuron must drop the target probability more than the
/// mean over size-matched random ablations. Returns (hits, seeds).
pub fn suppression_asymmetry(seeds: usize) -> Result<(usize, usize)> {
    let mut hits = 0;
    for seed in 0..seeds as u64 {
        let toy = random_planted_toy(seed, 1)?;
        let set = NeuronSet::from_refs(toy.planted.iter().copied());
        let report = suppression_experiment(
            &toy.model,
            &toy.prompt,
            &set,
            SUPPRESSION_TRIALS,
            seed,
        )?;
        if report.attributed_delta > report.random_mean() {
            hits += 1;
        }
    }
    Ok((hits, seeds))
}

fn required_hits(seeds: usize) -> usize {
    ((seeds as f64) * 0.95).ceil() as usize
}

/// The full oracle-agreement suite. `passed` is the conjunction.
pub fn run_all(seeds: usize) -> Result<(Vec<CheckOut>, bool)> {
    let mut checks = Vec::new();

    let (hits, total) = top1_agreement(seeds)?;
    checks.push(CheckOut {
        name: "top1-oracle-agreement".into(),
        passed: hits >= required_hits(total),
        detail: format!("{hits}/{total} single-planted toys (required {})", required_hits(total)),
    });

    let mean_jaccard = top10_jaccard(seeds)?;
    checks.push(CheckOut {
        name: "top10-jaccard".into(),
        passed: mean_jaccard >= 0.6,
        detail: format!("mean Jaccard {mean_jaccard:.4} over 3-planted toys (required 0.6)"),
    });

    let (hits, total) = suppression_asymmetry(seeds)?;
    checks.push(CheckOut {
        name: "suppression-asymmetry".into(),
        passed: hits >= required_hits(total),
        detail: format!(
            "{hits}/{total} planted ablations beat the random mean (required {})",
            required_hits(total)
        ),
    });

    let passed = checks.iter().all(|c| c.passed);
    Ok((checks, passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_toys_are_reproducible() {
        let a = random_planted_toy(5, 2).unwrap();
        let b = random_planted_toy(5, 2).unwrap();
        assert_eq!(a.planted, b.planted);
        assert_eq!(a.prompt, b.prompt);
        let fa = a.model.forward(&a.prompt).unwrap();
        let fb = b.model.forward(&b.prompt).unwrap();
        assert_eq!(fa.logit.to_bits(), fb.logit.to_bits());
    }

    #[test]
    fn small_sweep_passes() {
        let (checks, passed) = run_all(10).unwrap();
        assert!(passed, "{checks:?}");
        assert_eq!(checks.len(), 3);
    }
}
