//! Layer-wise statistics, overlap machinery, and the suppression experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::model::{LayerScales, MaskedLm, TokenizedPrompt};
use crate::selection::{coarse_select, refine, NeuronRef, NeuronSet};

/// Per-layer mean / standard deviation / maximum of attribution scores,
/// averaged over prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub max: Vec<f64>,
    pub n_prompts: usize,
}

/// Overlap between two refined neuron sets across a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    pub t_grid: Vec<f64>,
    /// Jaccard overlap `|A n B| / |A u B|` per threshold.
    pub values: Vec<f64>,
    /// Auxiliary `|A n B| / min(|A|, |B|)` reading of "percentage of common
    /// neurons", for comparison under either convention.
    pub values_min: Vec<f64>,
    /// Refined set sizes `(|A|, |B|)` per threshold, for diagnostics.
    pub set_sizes: Vec<(usize, usize)>,
}

/// Common-neuron counts per layer at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlapHistogram {
    pub counts: Vec<usize>,
    /// Threshold the sets were selected at, when known.
    pub t: Option<f64>,
}

/// Outcome of zeroing an attributed neuron set versus random controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub base_prob: f64,
    pub suppressed_prob: f64,
    /// `base_prob - suppressed_prob` for the attributed set.
    pub attributed_delta: f64,
    /// One probability drop per size-matched random ablation.
    pub random_deltas: Vec<f64>,
    pub set_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl SuppressionReport {
    pub fn random_mean(&self) -> f64 {
        if self.random_deltas.is_empty() {
            return 0.0;
        }
        self.random_deltas.iter().sum::<f64>() / self.random_deltas.len() as f64
    }

    pub fn random_std(&self) -> f64 {
        if self.random_deltas.is_empty() {
            return 0.0;
        }
        let mean = self.random_mean();
        let var = self
            .random_deltas
            .iter()
            .map(|d| (d - mean) * (d - mean))
            .sum::<f64>()
            / self.random_deltas.len() as f64;
        var.sqrt()
    }
}

/// Exactly permutation-invariant mean: sort the addends before summing.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum::<f64>() / values.len() as f64
}

/// Layer-wise statistics across prompts.
///
/// Per prompt, each layer is reduced over its `D` neurons to a mean, a
/// population standard deviation, and a maximum; each statistic is then
/// averaged across prompts. All maps must share a shape and cover all
/// layers.
pub fn layer_stats(maps: &[&AttributionMap]) -> Result<LayerStats> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("layer_stats needs at least one map".into()))?;
    let (layers, dim) = (first.layer_count(), first.intermediate_dim());
    for map in maps {
        if map.layer_count() != layers || map.intermediate_dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "attribution maps disagree on shape: {}x{} vs {}x{}",
                layers,
                dim,
                map.layer_count(),
                map.intermediate_dim()
            )));
        }
        if !map.fully_computed() {
            return Err(Error::InvalidArgument(
                "layer_stats requires maps attributed over all layers".into(),
            ));
        }
    }

    let mut mean = Vec::with_capacity(layers);
    let mut std = Vec::with_capacity(layers);
    let mut max = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut per_prompt_mean = Vec::with_capacity(maps.len());
        let mut per_prompt_std = Vec::with_capacity(maps.len());
        let mut per_prompt_max = Vec::with_capacity(maps.len());
        for map in maps {
            let row = map.scores().row(layer);
            let m = row.sum() / dim as f64;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / dim as f64;
            per_prompt_mean.push(m);
            per_prompt_std.push(var.sqrt());
            per_prompt_max.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        mean.push(stable_mean(&mut per_prompt_mean));
        std.push(stable_mean(&mut per_prompt_std));
        max.push(stable_mean(&mut per_prompt_max));
    }
    Ok(LayerStats {
        mean,
        std,
        max,
        n_prompts: maps.len(),
    })
}

/// Jaccard overlap `|A n B| / |A u B|`; 0 when both sets are empty.
pub fn overlap(a: &NeuronSet, b: &NeuronSet) -> f64 {
    let inter = a.intersection(b).len();
    let union = a.union(b).len();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|A n B| / min(|A|, |B|)`; 0 when either set is empty.
pub fn overlap_min(a: &NeuronSet, b: &NeuronSet) -> f64 {
    let smaller = a.len().min(b.len());
    if smaller == 0 {
        0.0
    } else {
        a.intersection(b).len() as f64 / smaller as f64
    }
}

/// Sweep the coarse threshold over `t_grid`: per threshold, select per
/// prompt, refine with the `P%` criterion on each side, and measure overlap.
///
/// Attribution maps are computed once by the caller and reused across the
/// grid.
pub fn overlap_curve(
    maps_a: &[&AttributionMap],
    maps_b: &[&AttributionMap],
    t_grid: &[f64],
    support_percent: f64,
) -> Result<OverlapCurve> {
    if maps_a.is_empty() || maps_b.is_empty() {
        return Err(Error::InvalidArgument(
            "overlap_curve needs nonempty map lists on both sides".into(),
        ));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0] || w[0].is_nan() || w[1].is_nan()) {
        return Err(Error::InvalidArgument(
            "threshold grid must be strictly increasing".into(),
        ));
    }

    let mut values = Vec::with_capacity(t_grid.len());
    let mut values_min = Vec::with_capacity(t_grid.len());
    let mut set_sizes = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let sets_a: Vec<NeuronSet> = maps_a
            .iter()
            .map(|m| coarse_select(m, t))
            .collect::<Result<_>>()?;
        let sets_b: Vec<NeuronSet> = maps_b
            .iter()
            .map(|m| coarse_select(m, t))
            .collect::<Result<_>>()?;
        let refined_a = refine(&sets_a, support_percent)?;
        let refined_b = refine(&sets_b, support_percent)?;
        values.push(overlap(&refined_a, &refined_b));
        values_min.push(overlap_min(&refined_a, &refined_b));
        set_sizes.push((refined_a.len(), refined_b.len()));
    }
    Ok(OverlapCurve {
        t_grid: t_grid.to_vec(),
        values,
        values_min,
        set_sizes,
    })
}

/// Count common neurons per layer.
pub fn layer_overlap(a: &NeuronSet, b: &NeuronSet, layer_count: usize) -> Result<LayerOverlapHistogram> {
    let mut counts = vec![0usize; layer_count];
    for n in a.intersection(b).refs() {
        if n.layer >= layer_count {
            return Err(Error::LayerOutOfRange {
                layer: n.layer,
                layer_count,
            });
        }
        counts[n.layer] += 1;
    }
    Ok(LayerOverlapHistogram { counts, t: None })
}

/// Zero the attributed set, then `trials` random sets of the same size, and
/// record the target-probability drop of each.
pub fn suppression_experiment<M: MaskedLm + ?Sized>(
    model: &M,
    prompt: &TokenizedPrompt,
    set: &NeuronSet,
    trials: usize,
    seed: u64,
) -> Result<SuppressionReport> {
    if set.is_empty() {
        return Err(Error::InvalidArgument(
            "suppression needs a nonempty neuron set".into(),
        ));
    }
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let info = model.info();
    for n in set.refs() {
        if n.layer >= info.layer_count || n.index >= info.intermediate_dim {
            return Err(Error::InvalidArgument(format!(
                "neuron ({}, {}) out of bounds for this model",
                n.layer, n.index
            )));
        }
    }

    let base = model.forward(prompt)?;
    let suppressed = model
        .scaled_forward_multi(prompt, &zeroing_scales(set, info.layer_count, info.intermediate_dim))?;

    let total = info.layer_count * info.intermediate_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_deltas = Vec::with_capacity(trials);
    for _ in 0..trials {
        let picks = rand::seq::index::sample(&mut rng, total, set.len());
        let random_set: NeuronSet = picks
            .iter()
            .map(|flat| NeuronRef {
                layer: flat / info.intermediate_dim,
                index: flat % info.intermediate_dim,
            })
            .collect();
        let out = model.scaled_forward_multi(
            prompt,
            &zeroing_scales(&random_set, info.layer_count, info.intermediate_dim),
        )?;
        random_deltas.push(base.prob - out.prob);
    }

    Ok(SuppressionReport {
        base_prob: base.prob,
        suppressed_prob: suppressed.prob,
        attributed_delta: base.prob - suppressed.prob,
        random_deltas,
        set_size: set.len(),
        trials,
        seed,
    })
}

/// All-ones scale vectors with zeros at the set's members, layer by layer.
fn zeroing_scales(set: &NeuronSet, layer_count: usize, dim: usize) -> LayerScales {
    let mut scales = LayerScales::new();
    for n in set.refs() {
        debug_assert!(n.layer < layer_count && n.index < dim);
        if scales.get(n.layer).is_none() {
            scales.set(n.layer, vec![1.0; dim]);
        }
    }
    let layers: Vec<usize> = scales.layers().collect();
    for layer in layers {
        let mut v = scales.get(layer).unwrap().to_vec();
        for n in set.refs() {
            if n.layer == layer {
                v[n.index] = 0.0;
            }
        }
        scales.set(layer, v);
    }
    scales
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionMap;
    use crate::toy::{PlantedNeuron, ToyModel, ToyModelSpec};
    use ndarray::array;

    fn map_from(rows: ndarray::Array2<f64>) -> AttributionMap {
        AttributionMap::from_dense(rows, "test".into(), 0)
    }

    fn n(layer: usize, index: usize) -> NeuronRef {
        NeuronRef { layer, index }
    }

    #[test]
    fn layer_stats_matches_hand_arithmetic() {
        let map = map_from(array![[1.0, 3.0], [2.0, 2.0]]);
        let stats = layer_stats(&[&map]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 2.0]);
        assert_eq!(stats.max, vec![3.0, 2.0]);
        assert_eq!(stats.std, vec![1.0, 0.0]);
        assert_eq!(stats.n_prompts, 1);
    }

    #[test]
    fn layer_stats_all_zero_map() {
        let map = map_from(ndarray::Array2::zeros((3, 4)));
        let stats = layer_stats(&[&map]).unwrap();
        assert_eq!(stats.mean, vec![0.0; 3]);
        assert_eq!(stats.std, vec![0.0; 3]);
        assert_eq!(stats.max, vec![0.0; 3]);
    }

    #[test]
    fn layer_stats_rejects_shape_mismatch() {
        let a = map_from(ndarray::Array2::zeros((2, 4)));
        let b = map_from(ndarray::Array2::zeros((2, 5)));
        assert!(matches!(
            layer_stats(&[&a, &b]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn layer_stats_is_permutation_invariant() {
        let a = map_from(array![[0.1, 0.7], [0.3, -0.2]]);
        let b = map_from(array![[1.0, -0.4], [0.9, 0.05]]);
        let c = map_from(array![[0.33, 0.21], [2.0, -1.0]]);
        let fwd = layer_stats(&[&a, &b, &c]).unwrap();
        let rev = layer_stats(&[&c, &a, &b]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn overlap_edges() {
        let a = NeuronSet::from_refs([n(0, 0), n(0, 1), n(1, 0)]);
        let b = NeuronSet::from_refs([n(0, 1), n(1, 0), n(2, 3)]);
        assert_eq!(overlap(&a, &a), 1.0);
        assert_eq!(overlap(&a, &b), 0.5); // 2 common / 4 total
        let empty = NeuronSet::new();
        assert_eq!(overlap(&empty, &empty), 0.0);
        let disjoint = NeuronSet::from_refs([n(5, 5)]);
        assert_eq!(overlap(&a, &disjoint), 0.0);
        assert_eq!(overlap_min(&a, &b), 2.0 / 3.0);
        assert_eq!(overlap_min(&a, &empty), 0.0);
    }

    #[test]
    fn layer_overlap_counts_per_layer() {
        let a = NeuronSet::from_refs([n(7, 1), n(7, 2), n(9, 0)]);
        let hist = layer_overlap(&a, &a, 12).unwrap();
        assert_eq!(hist.counts[7], 2);
        assert_eq!(hist.counts[9], 1);
        assert_eq!(hist.counts.iter().sum::<usize>(), 3);

        let b = NeuronSet::from_refs([n(1, 1)]);
        let hist = layer_overlap(&a, &b, 12).unwrap();
        assert_eq!(hist.counts, vec![0; 12]);
    }

    #[test]
    fn self_overlap_curve_is_one_where_nonempty() {
        let m1 = map_from(array![[0.5, 0.0], [0.2, 0.1]]);
        let m2 = map_from(array![[0.4, 0.05], [0.3, 0.0]]);
        let maps: Vec<&AttributionMap> = vec![&m1, &m2];
        let curve = overlap_curve(&maps, &maps, &[0.0, 0.1, 0.3, 0.6], 50.0).unwrap();
        for ((&v, &(sa, sb)), &vm) in curve
            .values
            .iter()
            .zip(&curve.set_sizes)
            .zip(&curve.values_min)
        {
            assert_eq!(sa, sb);
            if sa > 0 {
                assert_eq!(v, 1.0);
                assert_eq!(vm, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        // Largest threshold exceeds every score: both refined sets empty.
        assert_eq!(*curve.set_sizes.last().unwrap(), (0, 0));
    }

    #[test]
    fn overlap_curve_rejects_bad_grid() {
        let m = map_from(array![[0.5]]);
        let maps: Vec<&AttributionMap> = vec![&m];
        assert!(overlap_curve(&maps, &maps, &[0.2, 0.1], 50.0).is_err());
        assert!(overlap_curve(&maps, &maps, &[], 50.0).is_err());
    }

    fn planted_model() -> ToyModel {
        let mut spec = ToyModelSpec::new(2, 6, 10);
        spec.seed = 5;
        spec.planted = vec![PlantedNeuron {
            layer: 0,
            index: 3,
            trigger: vec![2, 3],
            value_token: 4,
            strength: 4.0,
        }];
        ToyModel::build(&spec).unwrap()
    }

    #[test]
    fn suppressing_planted_neuron_beats_random_controls() {
        let model = planted_model();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        let set = NeuronSet::from_refs([n(0, 3)]);
        let report = suppression_experiment(&model, &prompt, &set, 20, 99).unwrap();
        assert!(report.attributed_delta > 0.0);
        assert!(report.attributed_delta > report.random_mean());
        assert_eq!(report.random_deltas.len(), 20);
    }

    #[test]
    fn suppression_is_bitwise_reproducible_under_a_seed() {
        let model = planted_model();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        let set = NeuronSet::from_refs([n(0, 3), n(1, 1)]);
        let a = suppression_experiment(&model, &prompt, &set, 10, 1234).unwrap();
        let b = suppression_experiment(&model, &prompt, &set, 10, 1234).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.random_deltas.iter().zip(&b.random_deltas) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn suppression_rejects_empty_set() {
        let model = planted_model();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        assert!(matches!(
            suppression_experiment(&model, &prompt, &NeuronSet::new(), 5, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_scale_changes_nothing() {
        let model = planted_model();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        let base = model.forward(&prompt).unwrap();
        // Zeroing an empty complement: all-ones scales on both layers.
        let mut scales = LayerScales::new();
        scales.set(0, vec![1.0; 6]);
        scales.set(1, vec![1.0; 6]);
        let same = model.scaled_forward_multi(&prompt, &scales).unwrap();
        assert_eq!(base.prob.to_bits(), same.prob.to_bits());
        assert_eq!(base.prob - same.prob, 0.0);
    }
}
