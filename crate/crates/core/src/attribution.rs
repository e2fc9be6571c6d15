//! Integrated-gradients attribution of a target logit to feed-forward
//! neurons.
//!
//! For neuron `i` with actual activation `x_i` and zero baseline, the score
//! is the right-endpoint discrete sum
//!
//! ```text
//! score_i = x_i * (1/m) * sum_{k=1..m} grad_i(alpha = k/m)
//! ```
//!
//! where `grad` is the gradient of the target logit with respect to the
//! layer's intermediate activations evaluated at `alpha * x`. Scores are raw
//! (unnormalized) by default; negative scores are retained.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerScales, MaskedLm, TokenizedPrompt};
use crate::selection::NeuronRef;

/// Which layers to attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelection {
    All,
    Subset(BTreeSet<usize>),
}

impl LayerSelection {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerSelection::All => true,
            LayerSelection::Subset(s) => s.contains(&layer),
        }
    }

    fn validate(&self, layer_count: usize) -> Result<()> {
        if let LayerSelection::Subset(s) = self {
            if s.is_empty() {
                return Err(Error::InvalidArgument(
                    "layer selection must be nonempty".into(),
                ));
            }
            if let Some(&bad) = s.iter().find(|&&l| l >= layer_count) {
                return Err(Error::LayerOutOfRange {
                    layer: bad,
                    layer_count,
                });
            }
        }
        Ok(())
    }
}

/// Attribution settings. The baseline is fixed to the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Riemann steps `m >= 1`.
    pub steps: usize,
    pub layers: LayerSelection,
    /// Divide all scores by the map's maximum (when positive) so the top
    /// neuron reads 1.0. Off by default; thresholds in the rest of the
    /// toolkit are calibrated for raw scores.
    pub normalize: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            layers: LayerSelection::All,
            normalize: false,
        }
    }
}

impl AttributionConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    fn validate(&self, layer_count: usize) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        self.layers.validate(layer_count)
    }
}

/// Per-neuron attribution scores for one (prompt, target) pair.
///
/// Shape is `L x D`; rows for layers outside the requested selection are
/// zero-filled and flagged absent in `computed`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    scores: Array2<f64>,
    computed: Vec<bool>,
    pub prompt_id: String,
    pub target_id: u32,
    pub config: AttributionConfig,
}

impl AttributionMap {
    /// Wrap a dense matrix where every row is meaningful.
    pub fn from_dense(scores: Array2<f64>, prompt_id: String, target_id: u32) -> Self {
        let layers = scores.nrows();
        Self {
            scores,
            computed: vec![true; layers],
            prompt_id,
            target_id,
            config: AttributionConfig::default(),
        }
    }

    /// Reassemble a map from parts (used by the result-file reader).
    pub fn from_parts(
        scores: Array2<f64>,
        computed: Vec<bool>,
        prompt_id: String,
        target_id: u32,
        config: AttributionConfig,
    ) -> Result<Self> {
        if computed.len() != scores.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "computed flags ({}) do not match row count ({})",
                computed.len(),
                scores.nrows()
            )));
        }
        Ok(Self {
            scores,
            computed,
            prompt_id,
            target_id,
            config,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.scores.nrows()
    }

    pub fn intermediate_dim(&self) -> usize {
        self.scores.ncols()
    }

    pub fn is_computed(&self, layer: usize) -> bool {
        self.computed.get(layer).copied().unwrap_or(false)
    }

    pub fn fully_computed(&self) -> bool {
        self.computed.iter().all(|&c| c)
    }

    pub fn computed_flags(&self) -> &[bool] {
        &self.computed
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn get(&self, layer: usize, index: usize) -> Option<f64> {
        if self.is_computed(layer) {
            self.scores.get((layer, index)).copied()
        } else {
            None
        }
    }

    /// Rows that were actually attributed, in layer order.
    pub fn computed_rows(&self) -> impl Iterator<Item = (usize, ArrayView1<'_, f64>)> {
        self.scores
            .outer_iter()
            .enumerate()
            .filter(|(l, _)| self.computed[*l])
    }

    /// Maximum score over all computed entries.
    pub fn global_max(&self) -> Option<f64> {
        self.computed_rows()
            .flat_map(|(_, row)| row.into_iter().copied().collect::<Vec<_>>())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Highest-scoring neuron (raw score), ties broken by lowest layer then
    /// lowest index.
    pub fn argmax(&self) -> Option<(NeuronRef, f64)> {
        let mut best: Option<(NeuronRef, f64)> = None;
        for (layer, row) in self.computed_rows() {
            for (index, &score) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((NeuronRef { layer, index }, score));
                }
            }
        }
        best
    }

    /// Top `k` neurons by `|score|`, ties broken by (layer, index); the
    /// ordering mirrors the brute-force ablation ranking.
    pub fn top_k_by_magnitude(&self, k: usize) -> Vec<(NeuronRef, f64)> {
        let mut all: Vec<(NeuronRef, f64)> = self
            .computed_rows()
            .flat_map(|(layer, row)| {
                row.into_iter()
                    .enumerate()
                    .map(move |(index, &s)| (NeuronRef { layer, index }, s))
                    .collect::<Vec<_>>()
            })
            .collect();
        all.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// Scale every computed entry, used by the normalization flag.
    fn scale_all(&mut self, factor: f64) {
        for (layer, computed) in self.computed.iter().enumerate() {
            if *computed {
                self.scores.row_mut(layer).mapv_inplace(|v| v * factor);
            }
        }
    }
}

/// Integrated-gradients scores for every neuron of one layer.
pub fn ig_layer<M: MaskedLm + ?Sized>(
    model: &M,
    prompt: &TokenizedPrompt,
    layer: usize,
    config: &AttributionConfig,
) -> Result<Vec<f64>> {
    let info = model.info();
    config.validate(info.layer_count)?;
    if layer >= info.layer_count {
        return Err(Error::LayerOutOfRange {
            layer,
            layer_count: info.layer_count,
        });
    }
    let activations = model.capture_activations(prompt)?;
    let x = &activations[layer].values;

    let m = config.steps;
    let mut grad_sum = vec![0.0; info.intermediate_dim];
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        let grad = model.grad_intermediate(prompt, layer, alpha)?;
        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
            *acc += g;
        }
    }
    Ok(x.iter()
        .zip(&grad_sum)
        .map(|(&xi, &gsum)| {
            if xi == 0.0 {
                0.0 // zero-activation nullity, exact
            } else {
                xi * (gsum / m as f64)
            }
        })
        .collect())
}

/// Attribution over all requested layers for an already-tokenized prompt.
pub fn attribute_prompt<M: MaskedLm + ?Sized>(
    model: &M,
    prompt: &TokenizedPrompt,
    prompt_id: &str,
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    let info = model.info();
    config.validate(info.layer_count)?;
    let mut scores = Array2::zeros((info.layer_count, info.intermediate_dim));
    let mut computed = vec![false; info.layer_count];
    for (layer, flag) in computed.iter_mut().enumerate() {
        if !config.layers.contains(layer) {
            continue;
        }
        let row = ig_layer(model, prompt, layer, config)?;
        scores.row_mut(layer).assign(&ndarray::ArrayView1::from(&row));
        *flag = true;
    }
    let mut map = AttributionMap {
        scores,
        computed,
        prompt_id: prompt_id.to_string(),
        target_id: prompt.target_id,
        config: config.clone(),
    };
    if config.normalize {
        if let Some(max) = map.global_max() {
            if max > 0.0 {
                map.scale_all(1.0 / max);
            }
        }
    }
    Ok(map)
}

/// Tokenize and attribute a masked template against a target word.
pub fn attribute<M: MaskedLm + ?Sized>(
    model: &M,
    text: &str,
    target: &str,
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    let prompt = model.tokenize(text, target)?;
    attribute_prompt(model, &prompt, text, config)
}

/// `|sum_i score_i - (F(x) - F(0))|` for one layer: how far the discrete sum
/// is from the completeness identity satisfied by the exact integral.
pub fn completeness_residual<M: MaskedLm + ?Sized>(
    model: &M,
    prompt: &TokenizedPrompt,
    layer: usize,
    config: &AttributionConfig,
) -> Result<f64> {
    let scores = ig_layer(model, prompt, layer, config)?;
    let dim = model.info().intermediate_dim;
    let full = model
        .scaled_forward_multi(prompt, &LayerScales::uniform(layer, 1.0, dim))?
        .logit;
    let baseline = model
        .scaled_forward_multi(prompt, &LayerScales::uniform(layer, 0.0, dim))?
        .logit;
    Ok((scores.iter().sum::<f64>() - (full - baseline)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{AnalyticModel, PlantedNeuron, Readout, ToyModel, ToyModelSpec};

    fn linear_model() -> AnalyticModel {
        AnalyticModel::new(
            vec![vec![2.0, 3.0, 0.5], vec![1.0, 0.0, -2.0]],
            Readout::Linear {
                weights: vec![vec![0.5, -1.25, 2.0], vec![0.0, 0.0, 0.0]],
            },
        )
    }

    /// `F(h) = h_0^2` on layer 0 with x_0 = 2. The exact integral gives
    /// `score_0 = 4 = F(x) - F(0)`; the right-endpoint sum gives `4 + 4/m`.
    fn quadratic_model() -> AnalyticModel {
        AnalyticModel::new(
            vec![vec![2.0, 1.0]],
            Readout::Polynomial {
                quadratic: vec![vec![1.0, 0.0]],
                linear: vec![vec![0.0, 0.0]],
            },
        )
    }

    #[test]
    fn linear_readout_is_exact_for_any_step_count() {
        let model = linear_model();
        let prompt = model.prompt();
        let expected = [1.0, -3.75, 1.0]; // w_i * x_i by hand
        for m in [1, 5, 20] {
            let scores =
                ig_layer(&model, &prompt, 0, &AttributionConfig::with_steps(m)).unwrap();
            for (s, e) in scores.iter().zip(expected) {
                assert!(
                    (s - e).abs() <= 1e-12 * e.abs().max(1.0),
                    "m={m}: {s} vs {e}"
                );
            }
        }
    }

    #[test]
    fn constant_readout_scores_zero() {
        let model = linear_model();
        let prompt = model.prompt();
        // Layer 1 has all-zero weights: F is constant in its activations.
        let scores = ig_layer(&model, &prompt, 1, &AttributionConfig::with_steps(7)).unwrap();
        assert_eq!(scores, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_sum_approaches_the_closed_form_integral() {
        let model = quadratic_model();
        let prompt = model.prompt();
        for m in [10usize, 100, 300] {
            let scores =
                ig_layer(&model, &prompt, 0, &AttributionConfig::with_steps(m)).unwrap();
            let expected = 4.0 + 4.0 / m as f64;
            assert!(
                (scores[0] - expected).abs() < 1e-9,
                "m={m}: {} vs {expected}",
                scores[0]
            );
        }
        // At m=300 the error against the exact 4.0 is within 1%.
        let scores = ig_layer(&model, &prompt, 0, &AttributionConfig::with_steps(300)).unwrap();
        assert!((scores[0] - 4.0).abs() <= 0.01 * 4.0);
    }

    #[test]
    fn zero_activation_scores_are_exactly_zero() {
        let model = AnalyticModel::new(
            vec![vec![0.0, 5.0, 0.0]],
            Readout::Linear {
                weights: vec![vec![3.0, 2.0, -1.0]],
            },
        );
        let prompt = model.prompt();
        let scores = ig_layer(&model, &prompt, 0, &AttributionConfig::default()).unwrap();
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[2], 0.0);
        assert_eq!(scores[1], 10.0);
    }

    #[test]
    fn completeness_residual_shrinks_with_refinement() {
        let model = quadratic_model();
        let prompt = model.prompt();
        let mut last = f64::INFINITY;
        for m in [5usize, 10, 20, 50, 100, 300] {
            let r =
                completeness_residual(&model, &prompt, 0, &AttributionConfig::with_steps(m))
                    .unwrap();
            let expected = 4.0 / m as f64;
            assert!((r - expected).abs() < 1e-9, "m={m}: {r} vs {expected}");
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn completeness_residual_is_zero_for_linear_readouts() {
        let model = linear_model();
        let prompt = model.prompt();
        for m in [1usize, 3, 20] {
            let r = completeness_residual(&model, &prompt, 0, &AttributionConfig::with_steps(m))
                .unwrap();
            assert!(r < 1e-12, "m={m}: {r}");
        }
    }

    #[test]
    fn completeness_residual_on_planted_toys_at_m300() {
        let mut spec = ToyModelSpec::new(2, 8, 12);
        spec.seed = 19;
        spec.planted = vec![PlantedNeuron {
            layer: 0,
            index: 5,
            trigger: vec![2, 3],
            value_token: 4,
            strength: 2.0,
        }];
        let model = ToyModel::build(&spec).unwrap();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        for layer in 0..2 {
            let r = completeness_residual(
                &model,
                &prompt,
                layer,
                &AttributionConfig::with_steps(300),
            )
            .unwrap();
            let ones = model.scaled_forward(&prompt, layer, &[1.0; 8]).unwrap().logit;
            let zeros = model.scaled_forward(&prompt, layer, &[0.0; 8]).unwrap().logit;
            assert!(r <= 1e-3 * (ones - zeros).abs().max(1e-9), "layer {layer}: {r}");
        }
    }

    #[test]
    fn subset_selection_populates_only_requested_rows() {
        let model = linear_model();
        let prompt = model.prompt();
        let config = AttributionConfig {
            steps: 3,
            layers: LayerSelection::Subset([1usize].into_iter().collect()),
            normalize: false,
        };
        let map = attribute_prompt(&model, &prompt, "p", &config).unwrap();
        assert!(!map.is_computed(0));
        assert!(map.is_computed(1));
        assert_eq!(map.get(0, 0), None);
        assert!(map.scores().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_neuron_dominates_its_layer() {
        let mut spec = ToyModelSpec::new(3, 16, 12);
        spec.seed = 11;
        spec.planted = vec![PlantedNeuron {
            layer: 1,
            index: 9,
            trigger: vec![2, 3],
            value_token: 5,
            strength: 3.0,
        }];
        let model = ToyModel::build(&spec).unwrap();
        let prompt = model.tokenize("a b [MASK]", "d").unwrap();
        let map = attribute_prompt(&model, &prompt, "p", &AttributionConfig::default()).unwrap();
        let (top, score) = map.argmax().unwrap();
        assert_eq!(top, NeuronRef { layer: 1, index: 9 });
        assert!(score > 2.9);
    }

    #[test]
    fn attribute_propagates_tokenizer_errors() {
        let model = ToyModel::build(&ToyModelSpec::new(1, 2, 8)).unwrap();
        let err = attribute(&model, "a b c", "a", &AttributionConfig::default());
        assert!(matches!(err, Err(Error::PromptStructure(_))));
        let err = attribute(&model, "no mask here", "a", &AttributionConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn normalization_rescales_the_maximum_to_one() {
        let model = linear_model();
        let prompt = model.prompt();
        let config = AttributionConfig {
            steps: 4,
            layers: LayerSelection::All,
            normalize: true,
        };
        let map = attribute_prompt(&model, &prompt, "p", &config).unwrap();
        let max = map.global_max().unwrap();
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn determinism_identical_inputs_identical_maps() {
        let mut spec = ToyModelSpec::new(2, 8, 10);
        spec.seed = 3;
        let model = ToyModel::build(&spec).unwrap();
        let prompt = model.tokenize("a b c [MASK]", "e").unwrap();
        let a = attribute_prompt(&model, &prompt, "p", &AttributionConfig::default()).unwrap();
        let b = attribute_prompt(&model, &prompt, "p", &AttributionConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
