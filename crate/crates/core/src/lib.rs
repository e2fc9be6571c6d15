//! Attribute a masked language model's predictions to individual
//! feed-forward neurons with integrated gradients, then analyze how those
//! neurons distribute across layers, facts, and languages.
//!
//! The pipeline: a [`model::MaskedLm`] exposes per-layer feed-forward
//! intermediate activations at the mask position, scaled re-execution, and
//! gradients of one target logit; [`attribution`] turns those into per-neuron
//! scores; [`selection`] thresholds and refines scores into neuron sets;
//! [`analysis`] computes layer statistics, overlap curves, and suppression
//! experiments; [`grammar`] runs the number-agreement probe. [`toy`] builds
//! small planted-memory models with a brute-force ablation oracle so the
//! whole pipeline is verifiable at desk scale, and [`verify`] packages those
//! checks. Results serialize through [`results`] and render through
//! [`plot`].

pub mod analysis;
pub mod attribution;
pub mod error;
pub mod grammar;
pub mod model;
pub mod plot;
pub mod prompts;
pub mod results;
pub mod selection;
pub mod toy;
pub mod util;
pub mod verify;

pub use analysis::{
    layer_overlap, layer_stats, overlap, overlap_curve, overlap_min, suppression_experiment,
    LayerOverlapHistogram, LayerStats, OverlapCurve, SuppressionReport,
};
pub use attribution::{
    attribute, attribute_prompt, completeness_residual, ig_layer, AttributionConfig,
    AttributionMap, LayerSelection,
};
pub use error::{Error, Result};
pub use model::{
    load_model, LayerScales, MaskedLm, Model, ModelInfo, TargetOutput, TokenizedPrompt,
};
pub use selection::{
    adaptive_select, coarse_select, refine, NeuronRef, NeuronSet, RefinementPolicy, ThresholdMode,
};
pub use toy::{brute_force_ranking, AblationRanking, ToyModel, ToyModelSpec};
