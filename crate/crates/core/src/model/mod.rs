//! Uniform interface over masked language models.
//!
//! A model here is anything that can tokenize a masked prompt, expose the
//! per-layer feed-forward intermediate activations at the mask position,
//! re-run the forward pass with those activations scaled element-wise, and
//! differentiate one output logit with respect to them. Two implementations
//! ship with the crate: a BERT-family encoder loaded from a checkpoint
//! directory ([`bert::BertModel`]) and small planted-memory toy models
//! ([`crate::toy::ToyModel`]).

pub mod bert;
mod wordpiece;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub use wordpiece::WordPieceTokenizer;

/// Static description of a loaded model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInfo {
    /// Number of transformer layers, `L >= 1`.
    pub layer_count: usize,
    /// Width of the feed-forward intermediate vector, `D >= 1`.
    pub intermediate_dim: usize,
    /// Vocabulary size, `V >= 2`.
    pub vocab_size: usize,
    /// Human-readable identifier (checkpoint path or toy spec name).
    pub identifier: String,
    /// The literal mask placeholder string used in prompt text.
    pub mask_token: String,
}

impl ModelInfo {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.layer_count < 1 || self.intermediate_dim < 1 || self.vocab_size < 2 {
            return Err(Error::Load(format!(
                "degenerate model dimensions L={} D={} V={}",
                self.layer_count, self.intermediate_dim, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A tokenized masked prompt with a single mask and a single-token target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<u32>,
    /// Index into `token_ids` of the mask token.
    pub mask_position: usize,
    /// Vocabulary id whose logit is attributed.
    pub target_id: u32,
}

/// Feed-forward intermediate activations of one layer at the mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub layer: usize,
    pub values: Vec<f64>,
}

/// Target logit and softmax probability at the mask position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetOutput {
    pub logit: f64,
    pub prob: f64,
}

/// Per-layer element-wise scale vectors applied to the intermediate
/// activations at the mask position. Layers not present run unmodified.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerScales {
    scales: BTreeMap<usize, Vec<f64>>,
}

impl LayerScales {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scale a single layer.
    pub fn single(layer: usize, scale: Vec<f64>) -> Self {
        let mut s = Self::new();
        s.set(layer, scale);
        s
    }

    /// Uniform scale `alpha` applied to every component of one layer.
    pub fn uniform(layer: usize, alpha: f64, dim: usize) -> Self {
        Self::single(layer, vec![alpha; dim])
    }

    pub fn set(&mut self, layer: usize, scale: Vec<f64>) {
        self.scales.insert(layer, scale);
    }

    pub fn get(&self, layer: usize) -> Option<&[f64]> {
        self.scales.get(&layer).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.scales.keys().copied()
    }

    /// Check layer bounds, scale lengths, and finiteness against a model.
    pub fn validate(&self, info: &ModelInfo) -> Result<()> {
        for (&layer, scale) in &self.scales {
            if layer >= info.layer_count {
                return Err(Error::LayerOutOfRange {
                    layer,
                    layer_count: info.layer_count,
                });
            }
            if scale.len() != info.intermediate_dim {
                return Err(Error::ShapeMismatch(format!(
                    "scale for layer {layer} has length {}, expected {}",
                    scale.len(),
                    info.intermediate_dim
                )));
            }
            if scale.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "scale for layer {layer} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// The model-adapter contract.
///
/// All operations are pure with respect to the handle: no weight mutation,
/// and identical inputs produce bit-identical outputs. Handles implement
/// `Send + Sync`; forward passes allocate their own buffers, so one handle
/// may be shared across workers.
pub trait MaskedLm: Send + Sync {
    fn info(&self) -> &ModelInfo;

    /// Tokenize a masked template and a single-token target word.
    ///
    /// Fails with [`Error::PromptStructure`] unless the text contains exactly
    /// one mask placeholder, and with [`Error::MultiTokenTarget`] if the
    /// target maps to more than one vocabulary id.
    fn tokenize(&self, text: &str, target: &str) -> Result<TokenizedPrompt>;

    /// Forward pass with per-layer intermediate activations at the mask
    /// position multiplied element-wise by the given scale vectors.
    fn scaled_forward_multi(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
    ) -> Result<TargetOutput>;

    /// Gradient of the target logit with respect to one layer's intermediate
    /// activations, evaluated with those activations scaled by `alpha`
    /// (zero baseline: the evaluation point is `alpha * x`).
    fn grad_intermediate(
        &self,
        prompt: &TokenizedPrompt,
        layer: usize,
        alpha: f64,
    ) -> Result<Vec<f64>>;

    /// The actual (`alpha = 1`) intermediate activations at the mask
    /// position, one vector per layer.
    fn capture_activations(&self, prompt: &TokenizedPrompt) -> Result<Vec<ActivationVector>>;

    /// Single-layer convenience form of [`MaskedLm::scaled_forward_multi`].
    fn scaled_forward(
        &self,
        prompt: &TokenizedPrompt,
        layer: usize,
        scale: &[f64],
    ) -> Result<TargetOutput> {
        self.scaled_forward_multi(prompt, &LayerScales::single(layer, scale.to_vec()))
    }

    /// Unmodified forward pass.
    fn forward(&self, prompt: &TokenizedPrompt) -> Result<TargetOutput> {
        self.scaled_forward_multi(prompt, &LayerScales::new())
    }
}

/// A loaded model: either a checkpoint-backed encoder or a toy spec.
pub enum Model {
    Bert(Box<bert::BertModel>),
    Toy(Box<crate::toy::ToyModel>),
}

impl MaskedLm for Model {
    fn info(&self) -> &ModelInfo {
        match self {
            Model::Bert(m) => m.info(),
            Model::Toy(m) => m.info(),
        }
    }

    fn tokenize(&self, text: &str, target: &str) -> Result<TokenizedPrompt> {
        match self {
            Model::Bert(m) => m.tokenize(text, target),
            Model::Toy(m) => m.tokenize(text, target),
        }
    }

    fn scaled_forward_multi(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
    ) -> Result<TargetOutput> {
        match self {
            Model::Bert(m) => m.scaled_forward_multi(prompt, scales),
            Model::Toy(m) => m.scaled_forward_multi(prompt, scales),
        }
    }

    fn grad_intermediate(
        &self,
        prompt: &TokenizedPrompt,
        layer: usize,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        match self {
            Model::Bert(m) => m.grad_intermediate(prompt, layer, alpha),
            Model::Toy(m) => m.grad_intermediate(prompt, layer, alpha),
        }
    }

    fn capture_activations(&self, prompt: &TokenizedPrompt) -> Result<Vec<ActivationVector>> {
        match self {
            Model::Bert(m) => m.capture_activations(prompt),
            Model::Toy(m) => m.capture_activations(prompt),
        }
    }
}

/// Load a model from a checkpoint locator.
///
/// A directory is treated as a BERT-family checkpoint (`config.json`,
/// `vocab.txt`, `model.safetensors`); a file is treated as a toy model spec
/// in JSON form.
pub fn load_model(source: impl AsRef<Path>) -> Result<Model> {
    let path = source.as_ref();
    if path.is_dir() {
        Ok(Model::Bert(Box::new(bert::BertModel::load(path)?)))
    } else if path.is_file() {
        let spec = crate::toy::ToyModelSpec::from_file(path)?;
        Ok(Model::Toy(Box::new(crate::toy::ToyModel::build(&spec)?)))
    } else {
        Err(Error::Load(format!(
            "no checkpoint directory or toy spec file at {}",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_model_dispatches_toy_spec_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        crate::toy::ToyModelSpec::new(2, 8, 10)
            .to_file(&path)
            .unwrap();
        let model = load_model(&path).unwrap();
        assert_eq!(model.info().layer_count, 2);
        assert_eq!(model.info().intermediate_dim, 8);
        assert!(matches!(model, Model::Toy(_)));
    }

    #[test]
    fn load_model_errors_on_missing_path() {
        match load_model("/nonexistent/place") {
            Err(err) => {
                assert!(matches!(err, Error::Load(_)));
                assert_eq!(err.category(), "load");
            }
            Ok(_) => panic!("expected a load error"),
        }
    }

    #[test]
    fn layer_scales_validation() {
        let info = ModelInfo {
            layer_count: 2,
            intermediate_dim: 3,
            vocab_size: 5,
            identifier: "t".into(),
            mask_token: "[MASK]".into(),
        };
        assert!(LayerScales::single(0, vec![1.0; 3]).validate(&info).is_ok());
        assert!(matches!(
            LayerScales::single(5, vec![1.0; 3]).validate(&info),
            Err(Error::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            LayerScales::single(0, vec![1.0; 2]).validate(&info),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            LayerScales::single(0, vec![f64::NAN, 1.0, 1.0]).validate(&info),
            Err(Error::InvalidArgument(_))
        ));
    }
}
