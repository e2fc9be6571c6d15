//! Versioned, self-describing JSON result files.
//!
//! Every file carries a `schema` tag (`igprobe/<kind>/<version>`) and the
//! manifest of the invocation that produced it. Layer indices in result
//! files are 1-based to match the usual figure axes (`layer_base: 1`);
//! in-memory structures stay 0-based. Files contain no timestamps, so a
//! repeated invocation with identical inputs and seed is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{LayerStats, OverlapCurve, SuppressionReport};
use crate::attribution::{AttributionConfig, AttributionMap, LayerSelection};
use crate::error::{Error, Result};
use crate::grammar::StratumStats;
use crate::model::ModelInfo;
use crate::selection::{NeuronRef, NeuronSet};

pub const LAYER_BASE: usize = 1;

pub const SCHEMA_ATTRIBUTION: &str = "igprobe/attribution-map/1";
pub const SCHEMA_LAYER_STATS: &str = "igprobe/layer-stats/1";
pub const SCHEMA_NEURON_SET: &str = "igprobe/neuron-set/1";
pub const SCHEMA_OVERLAP_CURVE: &str = "igprobe/overlap-curve/1";
pub const SCHEMA_LAYER_OVERLAP: &str = "igprobe/layer-overlap/1";
pub const SCHEMA_SUPPRESSION: &str = "igprobe/suppression/1";
pub const SCHEMA_GRAMMAR_STATS: &str = "igprobe/grammar-stats/1";
pub const SCHEMA_GRAMMAR_NEURONS: &str = "igprobe/grammar-neurons/1";
pub const SCHEMA_TOY_VERIFY: &str = "igprobe/toy-verify/1";

/// Reproducibility envelope embedded in every result file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub command: String,
    pub parameters: BTreeMap<String, String>,
    pub model: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn parameter(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.insert(key.to_string(), value.to_string());
        self
    }

    pub fn model(mut self, identifier: &str) -> Self {
        self.model = identifier.to_string();
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input_file(mut self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(self)
    }

    pub fn input_bytes(mut self, label: &str, bytes: &[u8]) -> Self {
        self.inputs.push(InputDigest {
            path: label.to_string(),
            sha256: sha256_hex(bytes),
        });
        self
    }

    pub fn output(mut self, path: &str) -> Self {
        self.outputs.push(path.to_string());
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// File bodies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub identifier: String,
    pub layer_count: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
}

impl From<&ModelInfo> for ModelMeta {
    fn from(info: &ModelInfo) -> Self {
        Self {
            identifier: info.identifier.clone(),
            layer_count: info.layer_count,
            intermediate_dim: info.intermediate_dim,
            vocab_size: info.vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub set_id: Option<String>,
    pub index: Option<usize>,
    pub text: String,
    pub target: String,
    pub target_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMapFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    pub model: ModelMeta,
    pub prompt: PromptMeta,
    pub steps: usize,
    pub normalized: bool,
    /// 1-based indices of rows that were actually attributed.
    pub computed_layers: Vec<usize>,
    /// Row-major `L x D` score matrix; absent rows are zero-filled.
    pub scores: Vec<Vec<f64>>,
}

impl AttributionMapFile {
    pub fn build(
        manifest: Manifest,
        info: &ModelInfo,
        prompt: PromptMeta,
        map: &AttributionMap,
    ) -> Self {
        Self {
            schema: SCHEMA_ATTRIBUTION.to_string(),
            layer_base: LAYER_BASE,
            manifest,
            model: ModelMeta::from(info),
            prompt,
            steps: map.config.steps,
            normalized: map.config.normalize,
            computed_layers: (0..map.layer_count())
                .filter(|&l| map.is_computed(l))
                .map(|l| l + LAYER_BASE)
                .collect(),
            scores: map
                .scores()
                .outer_iter()
                .map(|row| row.to_vec())
                .collect(),
        }
    }

    /// Back to the in-memory representation (0-based layers).
    pub fn to_map(&self) -> Result<AttributionMap> {
        let layers = self.scores.len();
        let dim = self.scores.first().map(Vec::len).unwrap_or(0);
        if layers == 0 || dim == 0 {
            return Err(Error::Format("empty score matrix".into()));
        }
        if self.scores.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged score matrix".into()));
        }
        let mut flat = Vec::with_capacity(layers * dim);
        for row in &self.scores {
            flat.extend_from_slice(row);
        }
        let scores = Array2::from_shape_vec((layers, dim), flat)
            .map_err(|e| Error::Format(format!("bad score matrix: {e}")))?;
        let mut computed = vec![false; layers];
        for &l in &self.computed_layers {
            let l0 = l
                .checked_sub(self.layer_base)
                .ok_or_else(|| Error::Format(format!("layer index {l} below layer_base")))?;
            if l0 >= layers {
                return Err(Error::Format(format!("computed layer {l} out of range")));
            }
            computed[l0] = true;
        }
        let config = AttributionConfig {
            steps: self.steps,
            layers: if computed.iter().all(|&c| c) {
                LayerSelection::All
            } else {
                LayerSelection::Subset(
                    computed
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c)
                        .map(|(l, _)| l)
                        .collect(),
                )
            },
            normalize: self.normalized,
        };
        AttributionMap::from_parts(
            scores,
            computed,
            self.prompt.text.clone(),
            self.prompt.target_id,
            config,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStatsFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    pub n_prompts: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub max: Vec<f64>,
}

impl LayerStatsFile {
    pub fn build(manifest: Manifest, stats: &LayerStats) -> Self {
        Self {
            schema: SCHEMA_LAYER_STATS.to_string(),
            layer_base: LAYER_BASE,
            manifest,
            n_prompts: stats.n_prompts,
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            max: stats.max.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronRecord {
    /// 1-based layer index.
    pub layer: usize,
    pub index: usize,
    pub support: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSetFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    pub layer_count: usize,
    pub members: Vec<NeuronRecord>,
}

impl NeuronSetFile {
    pub fn build(manifest: Manifest, set: &NeuronSet, layer_count: usize) -> Self {
        Self {
            schema: SCHEMA_NEURON_SET.to_string(),
            layer_base: LAYER_BASE,
            manifest,
            layer_count,
            members: set
                .iter()
                .map(|(n, &support)| NeuronRecord {
                    layer: n.layer + LAYER_BASE,
                    index: n.index,
                    support,
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<NeuronSet> {
        let mut set = NeuronSet::new();
        for record in &self.members {
            let layer = record
                .layer
                .checked_sub(self.layer_base)
                .ok_or_else(|| Error::Format("layer index below layer_base".into()))?;
            for _ in 0..record.support.max(1) {
                set.insert(NeuronRef {
                    layer,
                    index: record.index,
                });
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurveFile {
    pub schema: String,
    pub manifest: Manifest,
    pub support_percent: f64,
    pub t_grid: Vec<f64>,
    pub jaccard: Vec<f64>,
    pub overlap_min: Vec<f64>,
    pub sizes_a: Vec<usize>,
    pub sizes_b: Vec<usize>,
}

impl OverlapCurveFile {
    pub fn build(manifest: Manifest, support_percent: f64, curve: &OverlapCurve) -> Self {
        Self {
            schema: SCHEMA_OVERLAP_CURVE.to_string(),
            manifest,
            support_percent,
            t_grid: curve.t_grid.clone(),
            jaccard: curve.values.clone(),
            overlap_min: curve.values_min.clone(),
            sizes_a: curve.set_sizes.iter().map(|(a, _)| *a).collect(),
            sizes_b: curve.set_sizes.iter().map(|(_, b)| *b).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlapFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub t: Option<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionFile {
    pub schema: String,
    pub manifest: Manifest,
    pub base_prob: f64,
    pub suppressed_prob: f64,
    pub attributed_delta: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub random_deltas: Vec<f64>,
    pub set_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl SuppressionFile {
    pub fn build(manifest: Manifest, report: &SuppressionReport) -> Self {
        Self {
            schema: SCHEMA_SUPPRESSION.to_string(),
            manifest,
            base_prob: report.base_prob,
            suppressed_prob: report.suppressed_prob,
            attributed_delta: report.attributed_delta,
            random_mean: report.random_mean(),
            random_std: report.random_std(),
            random_deltas: report.random_deltas.clone(),
            set_size: report.set_size,
            trials: report.trials,
            seed: report.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub max: Vec<f64>,
}

impl From<&LayerStats> for PolarityStats {
    fn from(stats: &LayerStats) -> Self {
        Self {
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            max: stats.max.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumOut {
    pub n_attractors: u32,
    pub n_examples: usize,
    pub good: PolarityStats,
    pub bad: PolarityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarStatsFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    pub steps: usize,
    pub examples_used: usize,
    pub examples_skipped: usize,
    pub strata: Vec<StratumOut>,
}

impl GrammarStatsFile {
    pub fn build(
        manifest: Manifest,
        steps: usize,
        examples_used: usize,
        examples_skipped: usize,
        strata: &BTreeMap<u32, StratumStats>,
    ) -> Self {
        Self {
            schema: SCHEMA_GRAMMAR_STATS.to_string(),
            layer_base: LAYER_BASE,
            manifest,
            steps,
            examples_used,
            examples_skipped,
            strata: strata
                .iter()
                .map(|(&n_attractors, s)| StratumOut {
                    n_attractors,
                    n_examples: s.n_examples,
                    good: PolarityStats::from(&s.good),
                    bad: PolarityStats::from(&s.bad),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumNeurons {
    pub n_attractors: u32,
    pub n_examples: usize,
    /// Mean per-layer count of neurons selected for both forms.
    pub common_mean: Vec<f64>,
    /// Mean per-layer count of neurons selected for exactly one form.
    pub distinct_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarNeuronsFile {
    pub schema: String,
    pub layer_base: usize,
    pub manifest: Manifest,
    pub adaptive_fraction: f64,
    pub strata: Vec<StratumNeurons>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOut {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVerifyFile {
    pub schema: String,
    pub manifest: Manifest,
    pub seeds: usize,
    pub checks: Vec<CheckOut>,
    pub passed: bool,
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

/// Canonical writer: pretty JSON + trailing newline, deterministic field
/// order.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialize result: {e}")))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Read a result file's schema tag without committing to a body type.
pub fn peek_schema(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Head {
        schema: String,
    }
    let head: Head = read_json(path)?;
    Ok(head.schema)
}

pub fn expect_schema(found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "expected schema {expected}, found {found}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{attribute_prompt, AttributionConfig};
    use crate::toy::{ToyModel, ToyModelSpec};
    use crate::model::MaskedLm;

    #[test]
    fn attribution_file_round_trips_and_uses_one_based_layers() {
        let model = ToyModel::build(&ToyModelSpec::new(3, 4, 10)).unwrap();
        let prompt = model.tokenize("a b [MASK]", "c").unwrap();
        let map =
            attribute_prompt(&model, &prompt, "a b [MASK]", &AttributionConfig::with_steps(4))
                .unwrap();
        let file = AttributionMapFile::build(
            Manifest::new("attribute").model(&model.info().identifier),
            model.info(),
            PromptMeta {
                set_id: None,
                index: None,
                text: "a b [MASK]".into(),
                target: "c".into(),
                target_id: prompt.target_id,
            },
            &map,
        );
        assert_eq!(file.computed_layers, vec![1, 2, 3]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        write_json(&file, &path).unwrap();
        assert_eq!(peek_schema(&path).unwrap(), SCHEMA_ATTRIBUTION);
        let loaded: AttributionMapFile = read_json(&path).unwrap();
        assert_eq!(loaded, file);
        let restored = loaded.to_map().unwrap();
        assert_eq!(restored.scores(), map.scores());
    }

    #[test]
    fn neuron_set_file_round_trips_support_counts() {
        let mut set = NeuronSet::new();
        set.insert(NeuronRef { layer: 0, index: 3 });
        set.insert(NeuronRef { layer: 0, index: 3 });
        set.insert(NeuronRef { layer: 2, index: 1 });
        let file = NeuronSetFile::build(Manifest::new("select"), &set, 4);
        assert_eq!(file.members[0].layer, 1); // 1-based
        let restored = file.to_set().unwrap();
        assert_eq!(restored.support(&NeuronRef { layer: 0, index: 3 }), 2);
        assert_eq!(restored.len(), 2);
    }

    #[test]
    fn manifests_have_no_timestamps() {
        let manifest = Manifest::new("attribute").parameter("steps", 20).seed(7);
        let json = serde_json::to_string(&manifest).unwrap();
        assert!(!json.contains("time"));
        assert!(!json.contains("date"));
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
