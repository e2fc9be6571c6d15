//! Small deterministic masked-LM-shaped models with planted key-value
//! memories, plus a brute-force ablation oracle.
//!
//! A toy model reads a bag-of-tokens vector through per-layer key matrices
//! into ReLU "intermediate" activations, and sums per-layer value matrices
//! over those activations straight into the output logits. The target logit
//! is therefore exactly linear in every layer's intermediate vector, which
//! gives every attribution and ablation quantity a closed form. Planted
//! neurons respond to a trigger token multiset and add `strength` to one
//! vocabulary logit; all other weights are small seeded noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ActivationVector, LayerScales, MaskedLm, ModelInfo, TargetOutput, TokenizedPrompt,
};
use crate::selection::NeuronRef;

/// Maximum `L * D` accepted by [`brute_force_ranking`].
pub const BRUTE_FORCE_NEURON_CAP: usize = 10_000;

const MASK_TOKEN: &str = "[MASK]";

/// One planted key-value memory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantedNeuron {
    pub layer: usize,
    pub index: usize,
    /// Token-id multiset that activates the neuron. The activation equals the
    /// matched fraction of the trigger, so a prompt containing the full
    /// multiset yields exactly 1.0.
    pub trigger: Vec<u32>,
    /// Vocabulary id whose logit the neuron's value vector feeds.
    pub value_token: u32,
    /// Logit contribution per unit activation, `> 0`.
    pub strength: f64,
}

/// Serializable construction recipe for a toy model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyModelSpec {
    pub layer_count: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub planted: Vec<PlantedNeuron>,
    #[serde(default)]
    pub seed: u64,
    /// Magnitude of non-planted weights, relative to the largest planted
    /// strength (absolute when nothing is planted).
    #[serde(default = "default_noise_magnitude")]
    pub noise_magnitude: f64,
    /// Optional explicit vocabulary; must contain the `[MASK]` string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

fn default_noise_magnitude() -> f64 {
    1e-3
}

impl ToyModelSpec {
    /// A minimal spec with default noise and no planted memories.
    pub fn new(layer_count: usize, intermediate_dim: usize, vocab_size: usize) -> Self {
        Self {
            layer_count,
            intermediate_dim,
            vocab_size,
            planted: Vec::new(),
            seed: 0,
            noise_magnitude: default_noise_magnitude(),
            vocab: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read toy spec {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("invalid toy spec {}: {e}", path.display())))
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("cannot serialize toy spec: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.layer_count < 1 || self.intermediate_dim < 1 || self.vocab_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "toy spec dimensions out of range: L={} D={} V={}",
                self.layer_count, self.intermediate_dim, self.vocab_size
            )));
        }
        if !self.noise_magnitude.is_finite() || self.noise_magnitude < 0.0 {
            return Err(Error::InvalidArgument(
                "noise_magnitude must be finite and >= 0".into(),
            ));
        }
        let mut seen = BTreeMap::new();
        for p in &self.planted {
            if p.layer >= self.layer_count || p.index >= self.intermediate_dim {
                return Err(Error::InvalidArgument(format!(
                    "planted neuron ({}, {}) out of bounds",
                    p.layer, p.index
                )));
            }
            if p.value_token as usize >= self.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "planted value token {} out of vocabulary",
                    p.value_token
                )));
            }
            if p.trigger.is_empty() || p.trigger.iter().any(|&t| t as usize >= self.vocab_size) {
                return Err(Error::InvalidArgument(
                    "planted trigger must be a nonempty multiset of in-vocabulary ids".into(),
                ));
            }
            if !p.strength.is_finite() || p.strength <= 0.0 {
                return Err(Error::InvalidArgument(
                    "planted strength must be finite and > 0".into(),
                ));
            }
            if seen.insert((p.layer, p.index), ()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate planted neuron ({}, {})",
                    p.layer, p.index
                )));
            }
        }
        if let Some(vocab) = &self.vocab {
            if vocab.len() != self.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "explicit vocab has {} entries, spec says {}",
                    vocab.len(),
                    self.vocab_size
                )));
            }
            if !vocab.iter().any(|w| w == MASK_TOKEN) {
                return Err(Error::InvalidArgument(format!(
                    "explicit vocab must contain {MASK_TOKEN}"
                )));
            }
        }
        Ok(())
    }
}

fn default_vocab(vocab_size: usize) -> Vec<String> {
    (0..vocab_size)
        .map(|id| match id {
            0 => "[pad]".to_string(),
            1 => MASK_TOKEN.to_string(),
            _ if id - 2 < 26 => ((b'a' + (id - 2) as u8) as char).to_string(),
            _ => format!("w{id}"),
        })
        .collect()
}

/// A built toy model. Implements the full [`MaskedLm`] contract.
pub struct ToyModel {
    info: ModelInfo,
    vocab: Vec<String>,
    word_to_id: BTreeMap<String, u32>,
    mask_id: u32,
    /// Per layer: `[D, V]`, intermediate = relu(keys · bag).
    keys: Vec<Array2<f64>>,
    /// Per layer: `[V, D]`, logits += values · intermediate.
    values: Vec<Array2<f64>>,
    /// `[V, V]` base readout of the bag, keeps the softmax non-degenerate.
    base: Array2<f64>,
}

impl ToyModel {
    /// Construct the model from a spec. Deterministic in (spec, seed).
    pub fn build(spec: &ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let (l, d, v) = (spec.layer_count, spec.intermediate_dim, spec.vocab_size);
        let max_strength = spec
            .planted
            .iter()
            .map(|p| p.strength)
            .fold(f64::NEG_INFINITY, f64::max);
        let noise = spec.noise_magnitude * if max_strength.is_finite() { max_strength } else { 1.0 };

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sample = |rng: &mut ChaCha8Rng| {
            if noise == 0.0 {
                0.0
            } else {
                rng.gen_range(-noise..=noise)
            }
        };

        let mut keys = Vec::with_capacity(l);
        let mut values = Vec::with_capacity(l);
        for _ in 0..l {
            keys.push(Array2::from_shape_fn((d, v), |_| sample(&mut rng)));
            values.push(Array2::from_shape_fn((v, d), |_| sample(&mut rng)));
        }
        let base = Array2::from_shape_fn((v, v), |_| sample(&mut rng));

        for p in &spec.planted {
            let mut counts = vec![0.0; v];
            for &t in &p.trigger {
                counts[t as usize] += 1.0;
            }
            let denom = p.trigger.len() as f64;
            for (tok, row) in keys[p.layer].row_mut(p.index).iter_mut().enumerate() {
                *row = counts[tok] / denom;
            }
            values[p.layer][(p.value_token as usize, p.index)] = p.strength;
        }

        let vocab = spec.vocab.clone().unwrap_or_else(|| default_vocab(v));
        let word_to_id: BTreeMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let mask_id = word_to_id[MASK_TOKEN];

        let info = ModelInfo {
            layer_count: l,
            intermediate_dim: d,
            vocab_size: v,
            identifier: format!("toy-L{l}-D{d}-V{v}-seed{}", spec.seed),
            mask_token: MASK_TOKEN.to_string(),
        };
        info.validate()?;

        Ok(Self {
            info,
            vocab,
            word_to_id,
            mask_id,
            keys,
            values,
            base,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn word_pieces(&self, word: &str) -> Result<Vec<u32>> {
        if let Some(&id) = self.word_to_id.get(word) {
            return Ok(vec![id]);
        }
        word.chars()
            .map(|c| {
                self.word_to_id
                    .get(&c.to_string())
                    .copied()
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("word {word:?} not in toy vocabulary"))
                    })
            })
            .collect()
    }

    fn bag(&self, prompt: &TokenizedPrompt) -> Array1<f64> {
        let mut bag = Array1::zeros(self.info.vocab_size);
        for &t in &prompt.token_ids {
            bag[t as usize] += 1.0;
        }
        bag
    }

    fn activations(&self, bag: &Array1<f64>) -> Vec<Array1<f64>> {
        self.keys
            .iter()
            .map(|k| k.dot(bag).mapv(|x| x.max(0.0)))
            .collect()
    }

    fn check_prompt(&self, prompt: &TokenizedPrompt) -> Result<()> {
        let v = self.info.vocab_size as u32;
        if prompt.token_ids.iter().any(|&t| t >= v) || prompt.target_id >= v {
            return Err(Error::InvalidArgument(
                "prompt contains out-of-vocabulary ids".into(),
            ));
        }
        if prompt.mask_position >= prompt.token_ids.len() {
            return Err(Error::InvalidArgument("mask position out of range".into()));
        }
        Ok(())
    }
}

impl MaskedLm for ToyModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn tokenize(&self, text: &str, target: &str) -> Result<TokenizedPrompt> {
        if target.trim().is_empty() {
            return Err(Error::InvalidArgument("empty target word".into()));
        }
        let words: Vec<&str> = text.split_whitespace().collect();
        // Structure first: mask arity is checked before vocabulary lookups.
        match words.iter().filter(|w| **w == MASK_TOKEN).count() {
            0 => {
                return Err(Error::PromptStructure(format!(
                    "prompt contains no {MASK_TOKEN} placeholder"
                )))
            }
            1 => {}
            n => {
                return Err(Error::PromptStructure(format!(
                    "prompt contains {n} {MASK_TOKEN} placeholders, expected exactly 1"
                )))
            }
        }
        let mut token_ids = Vec::new();
        let mut mask_positions = Vec::new();
        for word in words {
            if word == MASK_TOKEN {
                mask_positions.push(token_ids.len());
                token_ids.push(self.mask_id);
            } else {
                token_ids.extend(self.word_pieces(word)?);
            }
        }
        let target_pieces = self.word_pieces(target.trim())?;
        if target_pieces.len() != 1 {
            return Err(Error::MultiTokenTarget {
                word: target.trim().to_string(),
                pieces: target_pieces.len(),
            });
        }
        Ok(TokenizedPrompt {
            token_ids,
            mask_position: mask_positions[0],
            target_id: target_pieces[0],
        })
    }

    fn scaled_forward_multi(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
    ) -> Result<TargetOutput> {
        self.check_prompt(prompt)?;
        scales.validate(&self.info)?;
        let bag = self.bag(prompt);
        let mut logits = self.base.dot(&bag);
        for (layer, mut act) in self.activations(&bag).into_iter().enumerate() {
            if let Some(scale) = scales.get(layer) {
                for (a, &s) in act.iter_mut().zip(scale) {
                    *a *= s;
                }
            }
            logits += &self.values[layer].dot(&act);
        }
        let target = prompt.target_id as usize;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
        Ok(TargetOutput {
            logit: logits[target],
            prob: (logits[target] - max).exp() / denom,
        })
    }

    fn grad_intermediate(
        &self,
        prompt: &TokenizedPrompt,
        layer: usize,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        if layer >= self.info.layer_count {
            return Err(Error::LayerOutOfRange {
                layer,
                layer_count: self.info.layer_count,
            });
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        // The readout is linear in the intermediate vector, so the gradient
        // is the target row of the value matrix, independent of alpha.
        Ok(self.values[layer]
            .row(prompt.target_id as usize)
            .to_vec())
    }

    fn capture_activations(&self, prompt: &TokenizedPrompt) -> Result<Vec<ActivationVector>> {
        self.check_prompt(prompt)?;
        let bag = self.bag(prompt);
        Ok(self
            .activations(&bag)
            .into_iter()
            .enumerate()
            .map(|(layer, a)| ActivationVector {
                layer,
                values: a.to_vec(),
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Analytic stubs
// ---------------------------------------------------------------------------

/// Closed-form readout of an [`AnalyticModel`].
#[derive(Debug, Clone)]
pub enum Readout {
    /// `logit = sum_l w[l] · h[l]`
    Linear { weights: Vec<Vec<f64>> },
    /// `logit = sum_l (quad[l] · h[l]^2 + lin[l] · h[l])`, elementwise powers
    Polynomial {
        quadratic: Vec<Vec<f64>>,
        linear: Vec<Vec<f64>>,
    },
}

/// An activation-level model stub with a hand-specified readout.
///
/// Activations are fixed per layer; the target logit is an explicit function
/// of the (scaled) activations, with exact gradients. Used to verify the
/// attribution numerics against hand-computable integrals. No tokenizer.
pub struct AnalyticModel {
    info: ModelInfo,
    activations: Vec<Vec<f64>>,
    readout: Readout,
}

impl AnalyticModel {
    pub fn new(activations: Vec<Vec<f64>>, readout: Readout) -> Self {
        let layer_count = activations.len();
        let dim = activations.first().map_or(1, Vec::len);
        assert!(layer_count >= 1 && dim >= 1, "need at least one layer");
        assert!(
            activations.iter().all(|a| a.len() == dim),
            "ragged activation layers"
        );
        let info = ModelInfo {
            layer_count,
            intermediate_dim: dim,
            vocab_size: 2,
            identifier: "analytic".into(),
            mask_token: MASK_TOKEN.to_string(),
        };
        Self {
            info,
            activations,
            readout,
        }
    }

    /// The one prompt this stub answers: mask at 0, target id 0.
    pub fn prompt(&self) -> TokenizedPrompt {
        TokenizedPrompt {
            token_ids: vec![1],
            mask_position: 0,
            target_id: 0,
        }
    }

    fn logit(&self, scaled: &[Vec<f64>]) -> f64 {
        match &self.readout {
            Readout::Linear { weights } => scaled
                .iter()
                .zip(weights)
                .map(|(h, w)| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum(),
            Readout::Polynomial { quadratic, linear } => scaled
                .iter()
                .zip(quadratic.iter().zip(linear))
                .map(|(h, (q, c))| {
                    h.iter()
                        .zip(q.iter().zip(c))
                        .map(|(a, (qq, cc))| qq * a * a + cc * a)
                        .sum::<f64>()
                })
                .sum(),
        }
    }
}

impl MaskedLm for AnalyticModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn tokenize(&self, _text: &str, _target: &str) -> Result<TokenizedPrompt> {
        Err(Error::Capability(
            "analytic stub has no tokenizer; use AnalyticModel::prompt".into(),
        ))
    }

    fn scaled_forward_multi(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
    ) -> Result<TargetOutput> {
        scales.validate(&self.info)?;
        let scaled: Vec<Vec<f64>> = self
            .activations
            .iter()
            .enumerate()
            .map(|(layer, act)| match scales.get(layer) {
                Some(s) => act.iter().zip(s).map(|(a, b)| a * b).collect(),
                None => act.clone(),
            })
            .collect();
        let logit = self.logit(&scaled);
        // Two-way softmax against a constant zero logit for the other id.
        let prob = match prompt.target_id {
            0 => 1.0 / (1.0 + (-logit).exp()),
            _ => 1.0 / (1.0 + logit.exp()),
        };
        Ok(TargetOutput {
            logit: if prompt.target_id == 0 { logit } else { 0.0 },
            prob,
        })
    }

    fn grad_intermediate(
        &self,
        _prompt: &TokenizedPrompt,
        layer: usize,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        if layer >= self.info.layer_count {
            return Err(Error::LayerOutOfRange {
                layer,
                layer_count: self.info.layer_count,
            });
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        let h: Vec<f64> = self.activations[layer].iter().map(|a| alpha * a).collect();
        Ok(match &self.readout {
            Readout::Linear { weights } => weights[layer].clone(),
            Readout::Polynomial { quadratic, linear } => h
                .iter()
                .zip(quadratic[layer].iter().zip(&linear[layer]))
                .map(|(hi, (q, c))| 2.0 * q * hi + c)
                .collect(),
        })
    }

    fn capture_activations(&self, _prompt: &TokenizedPrompt) -> Result<Vec<ActivationVector>> {
        Ok(self
            .activations
            .iter()
            .enumerate()
            .map(|(layer, values)| ActivationVector {
                layer,
                values: values.clone(),
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Brute-force ablation oracle
// ---------------------------------------------------------------------------

/// Every neuron ranked by the logit drop its single-neuron ablation causes.
#[derive(Debug, Clone)]
pub struct AblationRanking {
    /// `(neuron, delta_logit)` with `delta = F(x) - F(x | neuron zeroed)`,
    /// descending by `|delta|`, ties broken by (layer, index).
    pub entries: Vec<(NeuronRef, f64)>,
}

impl AblationRanking {
    pub fn top_k(&self, k: usize) -> Vec<NeuronRef> {
        self.entries.iter().take(k).map(|(n, _)| *n).collect()
    }

    pub fn top(&self) -> Option<NeuronRef> {
        self.entries.first().map(|(n, _)| *n)
    }
}

/// Zero every neuron in turn and record the target-logit drop.
///
/// Independent of the attribution path: uses only `scaled_forward`. Enforces
/// the `L * D <=` [`BRUTE_FORCE_NEURON_CAP`] size cap.
pub fn brute_force_ranking<M: MaskedLm + ?Sized>(
    model: &M,
    prompt: &TokenizedPrompt,
) -> Result<AblationRanking> {
    let info = model.info();
    let total = info.layer_count * info.intermediate_dim;
    if total > BRUTE_FORCE_NEURON_CAP {
        return Err(Error::Capacity(format!(
            "brute-force ablation over {total} neurons exceeds the cap of {BRUTE_FORCE_NEURON_CAP}"
        )));
    }
    let base = model.forward(prompt)?.logit;
    let mut entries = Vec::with_capacity(total);
    for layer in 0..info.layer_count {
        let mut scale = vec![1.0; info.intermediate_dim];
        for index in 0..info.intermediate_dim {
            scale[index] = 0.0;
            let ablated = model.scaled_forward(prompt, layer, &scale)?.logit;
            scale[index] = 1.0;
            entries.push((NeuronRef { layer, index }, base - ablated));
        }
    }
    entries.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    Ok(AblationRanking { entries })
}
