//! BERT-family masked-LM encoder with feed-forward intermediate hooks.
//!
//! Loads the published checkpoint layout (`config.json`, `vocab.txt`,
//! `model.safetensors`), runs a deterministic f64 forward pass, and computes
//! the gradient of one output logit with respect to any layer's post-GELU
//! feed-forward intermediate activations at the mask position via a
//! hand-written reverse pass. Scaling and gradients touch the mask position
//! only; the unscaled prefix of the network is cached per prompt.

use std::path::Path;
use std::sync::{Arc, Mutex};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::wordpiece::WordPieceTokenizer;
use crate::error::{Error, Result};
use crate::model::{
    ActivationVector, LayerScales, MaskedLm, ModelInfo, TargetOutput, TokenizedPrompt,
};
use crate::util::{gelu, gelu_grad};

const PREFIX_CACHE_CAPACITY: usize = 8;

#[derive(Debug, Clone, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab_size")]
    pub type_vocab_size: usize,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_hidden_act")]
    pub hidden_act: String,
    #[serde(default)]
    pub model_type: Option<String>,
    #[serde(default)]
    pub do_lower_case: Option<bool>,
}

fn default_type_vocab_size() -> usize {
    2
}
fn default_layer_norm_eps() -> f64 {
    1e-12
}
fn default_hidden_act() -> String {
    "gelu".to_string()
}

#[derive(Debug, Deserialize)]
struct TokenizerConfig {
    #[serde(default)]
    do_lower_case: Option<bool>,
}

/// `y = x . w + b`, with `w` stored forward-oriented as `[in, out]`.
struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Linear {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn forward_row(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// `dx = dy . w^T`
    fn backward(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w.t())
    }
}

struct Embeddings {
    word: Array2<f64>,
    position: Array2<f64>,
    token_type: Array2<f64>,
    ln_g: Array1<f64>,
    ln_b: Array1<f64>,
}

struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    ffn_in: Linear,
    ffn_out: Linear,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
}

struct MlmHead {
    transform: Linear,
    ln_g: Array1<f64>,
    ln_b: Array1<f64>,
    /// `[V, H]`; logits = decoder . t + bias.
    decoder: Array2<f64>,
    bias: Array1<f64>,
}

/// Unscaled per-prompt forward state: hidden inputs of every layer plus the
/// post-GELU intermediate at the mask position.
struct Prefix {
    /// `states[l]` is the hidden matrix entering layer `l`; `states[L]` is
    /// the final hidden matrix.
    states: Vec<Array2<f64>>,
    intermediates: Vec<Vec<f64>>,
}

type CacheKey = (Vec<u32>, usize);

pub struct BertModel {
    info: ModelInfo,
    config: BertConfig,
    tokenizer: WordPieceTokenizer,
    embeddings: Embeddings,
    layers: Vec<EncoderLayer>,
    head: MlmHead,
    cache: Mutex<Vec<(CacheKey, Arc<Prefix>)>>,
}

// -- layer norm ------------------------------------------------------------

fn layernorm_rows(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[i] + b[i];
        }
    }
    out
}

fn layernorm_row(x: &ArrayView1<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Array1::from_iter(
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - mean) * inv * g[i] + b[i]),
    )
}

/// Reverse a row-wise layer norm given the pre-normalization input.
fn layernorm_backward_row(
    x_pre: &ArrayView1<f64>,
    g: &Array1<f64>,
    dy: &ArrayView1<f64>,
    eps: f64,
) -> Array1<f64> {
    let n = x_pre.len() as f64;
    let mean = x_pre.sum() / n;
    let var = x_pre.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x_pre.iter().map(|&v| (v - mean) * inv).collect();
    let dyh: Vec<f64> = dy.iter().zip(g).map(|(&d, &gi)| d * gi).collect();
    let m1 = dyh.iter().sum::<f64>() / n;
    let m2 = dyh.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
    Array1::from_iter(
        dyh.iter()
            .zip(&xhat)
            .map(|(d, h)| (d - m1 - h * m2) * inv),
    )
}

fn layernorm_backward_rows(
    x_pre: &Array2<f64>,
    g: &Array1<f64>,
    dy: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(dy.raw_dim());
    for (i, (x_row, dy_row)) in x_pre.rows().into_iter().zip(dy.rows()).enumerate() {
        out.row_mut(i)
            .assign(&layernorm_backward_row(&x_row, g, &dy_row, eps));
    }
    out
}

// -- per-layer traces ------------------------------------------------------

struct LayerTrace {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    sum1: Array2<f64>,
    z: Array2<f64>,
    sum2: Array2<f64>,
}

struct HeadTrace {
    t_pre_gelu: Array1<f64>,
    t_post_gelu: Array1<f64>,
}

struct TailRun {
    start: usize,
    traces: Vec<LayerTrace>,
    head: HeadTrace,
    logits: Array1<f64>,
}

impl BertModel {
    /// Load a checkpoint directory in the published layout.
    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join("config.json");
        let config_text = std::fs::read_to_string(&config_path).map_err(|e| {
            Error::Load(format!("cannot read {}: {e}", config_path.display()))
        })?;
        let config: BertConfig = serde_json::from_str(&config_text)
            .map_err(|e| Error::Load(format!("invalid config.json: {e}")))?;

        if let Some(model_type) = &config.model_type {
            if model_type != "bert" {
                return Err(Error::Capability(format!(
                    "model_type {model_type:?} is not a supported masked-LM family (expected \"bert\")"
                )));
            }
        }
        if config.hidden_act != "gelu" {
            return Err(Error::Capability(format!(
                "hidden_act {:?} not supported (expected \"gelu\")",
                config.hidden_act
            )));
        }
        if !config.hidden_size.is_multiple_of(config.num_attention_heads) {
            return Err(Error::Load(
                "hidden_size must be divisible by num_attention_heads".into(),
            ));
        }

        let do_lower_case = read_do_lower_case(dir, &config);
        let tokenizer = WordPieceTokenizer::from_vocab_file(&dir.join("vocab.txt"), do_lower_case)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Load(format!(
                "vocab.txt has {} entries but config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }

        let weights_path = dir.join("model.safetensors");
        let buffer = std::fs::read(&weights_path).map_err(|e| {
            Error::Load(format!("cannot read {}: {e}", weights_path.display()))
        })?;
        let tensors = safetensors::SafeTensors::deserialize(&buffer)
            .map_err(|e| Error::Load(format!("invalid safetensors file: {e}")))?;
        let src = TensorSource { tensors };

        let (h, d, v) = (
            config.hidden_size,
            config.intermediate_size,
            config.vocab_size,
        );
        let embeddings = Embeddings {
            word: src.mat(&["embeddings.word_embeddings.weight"], (v, h), false)?,
            position: src.mat(
                &["embeddings.position_embeddings.weight"],
                (config.max_position_embeddings, h),
                false,
            )?,
            token_type: src.mat(
                &["embeddings.token_type_embeddings.weight"],
                (config.type_vocab_size, h),
                false,
            )?,
            ln_g: src.vec_ln(&["embeddings.LayerNorm"], h, true)?,
            ln_b: src.vec_ln(&["embeddings.LayerNorm"], h, false)?,
        };

        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for l in 0..config.num_hidden_layers {
            let p = format!("encoder.layer.{l}");
            layers.push(EncoderLayer {
                q: src.linear(&format!("{p}.attention.self.query"), h, h)?,
                k: src.linear(&format!("{p}.attention.self.key"), h, h)?,
                v: src.linear(&format!("{p}.attention.self.value"), h, h)?,
                attn_out: src.linear(&format!("{p}.attention.output.dense"), h, h)?,
                ln1_g: src.vec_ln(&[&format!("{p}.attention.output.LayerNorm")], h, true)?,
                ln1_b: src.vec_ln(&[&format!("{p}.attention.output.LayerNorm")], h, false)?,
                ffn_in: src.linear(&format!("{p}.intermediate.dense"), h, d)?,
                ffn_out: src.linear(&format!("{p}.output.dense"), d, h)?,
                ln2_g: src.vec_ln(&[&format!("{p}.output.LayerNorm")], h, true)?,
                ln2_b: src.vec_ln(&[&format!("{p}.output.LayerNorm")], h, false)?,
            });
        }

        let decoder = match src.mat(&["cls.predictions.decoder.weight"], (v, h), false) {
            Ok(m) => m,
            // Weights are commonly tied to the word embeddings.
            Err(_) => embeddings.word.clone(),
        };
        let bias = src
            .vec(&["cls.predictions.bias", "cls.predictions.decoder.bias"], v)
            .unwrap_or_else(|_| Array1::zeros(v));
        let head = MlmHead {
            transform: src.linear("cls.predictions.transform.dense", h, h)?,
            ln_g: src.vec_ln(&["cls.predictions.transform.LayerNorm"], h, true)?,
            ln_b: src.vec_ln(&["cls.predictions.transform.LayerNorm"], h, false)?,
            decoder,
            bias,
        };

        let info = ModelInfo {
            layer_count: config.num_hidden_layers,
            intermediate_dim: config.intermediate_size,
            vocab_size: config.vocab_size,
            identifier: dir.display().to_string(),
            mask_token: "[MASK]".to_string(),
        };
        info.validate()?;

        Ok(Self {
            info,
            config,
            tokenizer,
            embeddings,
            layers,
            head,
            cache: Mutex::new(Vec::new()),
        })
    }

    /// A randomly initialized encoder of the given shape, for tests and
    /// benchmarks. Deterministic in the seed.
    pub fn synthetic(
        num_layers: usize,
        hidden: usize,
        heads: usize,
        intermediate: usize,
        vocab: usize,
        seed: u64,
    ) -> Result<Self> {
        assert!(vocab >= 8, "synthetic vocab needs room for special tokens");
        let mut words: Vec<String> = vec![
            "[PAD]".into(),
            "[UNK]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
            "[MASK]".into(),
        ];
        for i in words.len()..vocab {
            words.push(format!("tok{i}"));
        }
        Self::synthetic_with_vocab(num_layers, hidden, heads, intermediate, words, false, seed)
    }

    /// Randomly initialized encoder over an explicit vocabulary (which must
    /// include the BERT special tokens). Deterministic in the seed.
    pub fn synthetic_with_vocab(
        num_layers: usize,
        hidden: usize,
        heads: usize,
        intermediate: usize,
        vocab_words: Vec<String>,
        do_lower_case: bool,
        seed: u64,
    ) -> Result<Self> {
        assert!(hidden.is_multiple_of(heads), "hidden must divide into heads");
        let vocab = vocab_words.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..=scale))
        };

        let config = BertConfig {
            vocab_size: vocab,
            hidden_size: hidden,
            num_hidden_layers: num_layers,
            num_attention_heads: heads,
            intermediate_size: intermediate,
            max_position_embeddings: 64,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_act: "gelu".into(),
            model_type: Some("bert".into()),
            do_lower_case: Some(do_lower_case),
        };

        let embeddings = Embeddings {
            word: mat(vocab, hidden, 0.5),
            position: mat(64, hidden, 0.1),
            token_type: mat(2, hidden, 0.05),
            ln_g: Array1::ones(hidden),
            ln_b: Array1::zeros(hidden),
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut lin = |i: usize, o: usize| {
            let scale = 1.0 / (i as f64).sqrt();
            Linear {
                w: Array2::from_shape_fn((i, o), |_| rng2.gen_range(-scale..=scale)),
                b: Array1::from_shape_fn(o, |_| rng2.gen_range(-0.02..=0.02)),
            }
        };
        let layers = (0..num_layers)
            .map(|_| EncoderLayer {
                q: lin(hidden, hidden),
                k: lin(hidden, hidden),
                v: lin(hidden, hidden),
                attn_out: lin(hidden, hidden),
                ln1_g: Array1::ones(hidden),
                ln1_b: Array1::zeros(hidden),
                ffn_in: lin(hidden, intermediate),
                ffn_out: lin(intermediate, hidden),
                ln2_g: Array1::ones(hidden),
                ln2_b: Array1::zeros(hidden),
            })
            .collect();
        let head = MlmHead {
            transform: lin(hidden, hidden),
            ln_g: Array1::ones(hidden),
            ln_b: Array1::zeros(hidden),
            decoder: embeddings.word.clone(),
            bias: Array1::zeros(vocab),
        };

        let tokenizer = WordPieceTokenizer::new(vocab_words, do_lower_case)?;

        let info = ModelInfo {
            layer_count: num_layers,
            intermediate_dim: intermediate,
            vocab_size: vocab,
            identifier: format!("synthetic-bert-L{num_layers}-H{hidden}-D{intermediate}-seed{seed}"),
            mask_token: "[MASK]".to_string(),
        };
        Ok(Self {
            info,
            config,
            tokenizer,
            embeddings,
            layers,
            head,
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }


    /// Write this model to a checkpoint directory in the published layout
    /// (f32 `model.safetensors` with HF tensor names and orientations,
    /// `config.json`, `vocab.txt`). Useful for building test fixtures.
    pub fn export_checkpoint(&self, dir: &Path) -> Result<()> {
        use safetensors::tensor::TensorView;
        use safetensors::Dtype;

        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = serde_json::json!({
            "model_type": "bert",
            "vocab_size": self.config.vocab_size,
            "hidden_size": self.config.hidden_size,
            "num_hidden_layers": self.config.num_hidden_layers,
            "num_attention_heads": self.config.num_attention_heads,
            "intermediate_size": self.config.intermediate_size,
            "max_position_embeddings": self.config.max_position_embeddings,
            "type_vocab_size": self.config.type_vocab_size,
            "layer_norm_eps": self.config.layer_norm_eps,
            "hidden_act": "gelu",
            "do_lower_case": self.config.do_lower_case.unwrap_or(false),
        });
        std::fs::write(dir.join("config.json"), config.to_string())
            .map_err(|e| Error::io(dir.join("config.json"), e))?;

        let vocab: Vec<String> = (0..self.config.vocab_size)
            .map(|i| self.tokenizer.token(i as u32).unwrap_or("[UNK]").to_string())
            .collect();
        std::fs::write(dir.join("vocab.txt"), vocab.join("\n") + "\n")
            .map_err(|e| Error::io(dir.join("vocab.txt"), e))?;

        fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
            values.flat_map(|v| (v as f32).to_le_bytes()).collect()
        }
        let mat = |a: &Array2<f64>| (vec![a.nrows(), a.ncols()], f32_bytes(a.iter().copied()));
        // Stored orientation is [in, out]; checkpoints carry [out, in].
        let mat_t = |a: &Array2<f64>| {
            (
                vec![a.ncols(), a.nrows()],
                f32_bytes(a.t().iter().copied()),
            )
        };
        let vec1 = |a: &Array1<f64>| (vec![a.len()], f32_bytes(a.iter().copied()));

        type NamedTensor = (String, (Vec<usize>, Vec<u8>));
        let mut tensors: Vec<NamedTensor> = vec![
            ("bert.embeddings.word_embeddings.weight".into(), mat(&self.embeddings.word)),
            ("bert.embeddings.position_embeddings.weight".into(), mat(&self.embeddings.position)),
            ("bert.embeddings.token_type_embeddings.weight".into(), mat(&self.embeddings.token_type)),
            ("bert.embeddings.LayerNorm.gamma".into(), vec1(&self.embeddings.ln_g)),
            ("bert.embeddings.LayerNorm.beta".into(), vec1(&self.embeddings.ln_b)),
            ("cls.predictions.transform.dense.weight".into(), mat_t(&self.head.transform.w)),
            ("cls.predictions.transform.dense.bias".into(), vec1(&self.head.transform.b)),
            ("cls.predictions.transform.LayerNorm.weight".into(), vec1(&self.head.ln_g)),
            ("cls.predictions.transform.LayerNorm.bias".into(), vec1(&self.head.ln_b)),
            // decoder weights omitted: tied to the word embeddings
            ("cls.predictions.bias".into(), vec1(&self.head.bias)),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("bert.encoder.layer.{l}");
            for (name, lin) in [
                ("attention.self.query", &layer.q),
                ("attention.self.key", &layer.k),
                ("attention.self.value", &layer.v),
                ("attention.output.dense", &layer.attn_out),
                ("intermediate.dense", &layer.ffn_in),
                ("output.dense", &layer.ffn_out),
            ] {
                tensors.push((format!("{p}.{name}.weight"), mat_t(&lin.w)));
                tensors.push((format!("{p}.{name}.bias"), vec1(&lin.b)));
            }
            tensors.push((format!("{p}.attention.output.LayerNorm.weight"), vec1(&layer.ln1_g)));
            tensors.push((format!("{p}.attention.output.LayerNorm.bias"), vec1(&layer.ln1_b)));
            tensors.push((format!("{p}.output.LayerNorm.weight"), vec1(&layer.ln2_g)));
            tensors.push((format!("{p}.output.LayerNorm.bias"), vec1(&layer.ln2_b)));
        }

        let views: Vec<(String, TensorView)> = tensors
            .iter()
            .map(|(name, (shape, bytes))| {
                (
                    name.clone(),
                    TensorView::new(Dtype::F32, shape.clone(), bytes)
                        .expect("consistent tensor shapes"),
                )
            })
            .collect();
        let blob = safetensors::serialize(views, &None)
            .map_err(|e| Error::Format(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(dir.join("model.safetensors"), blob)
            .map_err(|e| Error::io(dir.join("model.safetensors"), e))?;
        Ok(())
    }

    fn check_prompt(&self, prompt: &TokenizedPrompt) -> Result<()> {
        let v = self.config.vocab_size as u32;
        if prompt.token_ids.iter().any(|&t| t >= v) || prompt.target_id >= v {
            return Err(Error::InvalidArgument(
                "prompt contains out-of-vocabulary ids".into(),
            ));
        }
        if prompt.mask_position >= prompt.token_ids.len() {
            return Err(Error::InvalidArgument("mask position out of range".into()));
        }
        if prompt.token_ids.len() > self.config.max_position_embeddings {
            return Err(Error::PromptStructure(format!(
                "prompt of {} tokens exceeds the model's {} positions",
                prompt.token_ids.len(),
                self.config.max_position_embeddings
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let h = self.config.hidden_size;
        let mut x = Array2::zeros((ids.len(), h));
        for (pos, &id) in ids.iter().enumerate() {
            let word = self.embeddings.word.row(id as usize);
            let position = self.embeddings.position.row(pos);
            let ttype = self.embeddings.token_type.row(0);
            let mut row = x.row_mut(pos);
            for i in 0..h {
                row[i] = word[i] + position[i] + ttype[i];
            }
        }
        layernorm_rows(
            &x,
            &self.embeddings.ln_g,
            &self.embeddings.ln_b,
            self.config.layer_norm_eps,
        )
    }

    /// One encoder layer. `scale` multiplies the post-GELU intermediate at
    /// `mask_pos` element-wise. Recording returns the trace the backward pass
    /// needs; the arithmetic is identical either way.
    fn layer_forward(
        &self,
        layer: usize,
        x: &Array2<f64>,
        scale: Option<&[f64]>,
        mask_pos: usize,
        record: bool,
    ) -> (Array2<f64>, Vec<f64>, Option<LayerTrace>) {
        let eps = self.config.layer_norm_eps;
        let lw = &self.layers[layer];
        let seq = x.nrows();
        let heads = self.config.num_attention_heads;
        let head_dim = self.config.hidden_size / heads;
        let scale_factor = 1.0 / (head_dim as f64).sqrt();

        let q = lw.q.forward(x);
        let k = lw.k.forward(x);
        let v = lw.v.forward(x);

        let mut context = Array2::zeros((seq, self.config.hidden_size));
        let mut probs = Vec::with_capacity(if record { heads } else { 0 });
        for hd in 0..heads {
            let cols = s![.., hd * head_dim..(hd + 1) * head_dim];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale_factor;
            // Row-wise stable softmax.
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            let ctx_h = scores.dot(&vh);
            context.slice_mut(cols).assign(&ctx_h);
            if record {
                probs.push(scores);
            }
        }

        let attn_out = lw.attn_out.forward(&context);
        let sum1 = x + &attn_out;
        let x1 = layernorm_rows(&sum1, &lw.ln1_g, &lw.ln1_b, eps);

        let z = lw.ffn_in.forward(&x1);
        let mut inter = z.mapv(gelu);
        let intermediate_at_mask = inter.row(mask_pos).to_vec();
        if let Some(scale) = scale {
            let mut row = inter.row_mut(mask_pos);
            for (a, &s) in row.iter_mut().zip(scale) {
                *a *= s;
            }
        }
        let ffn_out = lw.ffn_out.forward(&inter);
        let sum2 = &x1 + &ffn_out;
        let x_out = layernorm_rows(&sum2, &lw.ln2_g, &lw.ln2_b, eps);

        let trace = record.then(|| LayerTrace {
            q,
            k,
            v,
            probs,
            sum1,
            z,
            sum2,
        });
        (x_out, intermediate_at_mask, trace)
    }

    fn head_forward(&self, h_row: &ArrayView1<f64>, record: bool) -> (Array1<f64>, Option<HeadTrace>) {
        let eps = self.config.layer_norm_eps;
        let t_pre = self.head.transform.forward_row(h_row);
        let t_post = t_pre.mapv(gelu);
        let t_norm = layernorm_row(&t_post.view(), &self.head.ln_g, &self.head.ln_b, eps);
        let logits = self.head.decoder.dot(&t_norm) + &self.head.bias;
        let trace = record.then(|| HeadTrace {
            t_pre_gelu: t_pre,
            t_post_gelu: t_post,
        });
        (logits, trace)
    }

    /// Unscaled forward pass, cached per (token_ids, mask_position).
    fn prefix(&self, prompt: &TokenizedPrompt) -> Arc<Prefix> {
        let key: CacheKey = (prompt.token_ids.clone(), prompt.mask_position);
        {
            let cache = self.cache.lock().unwrap();
            if let Some((_, p)) = cache.iter().find(|(k, _)| *k == key) {
                return Arc::clone(p);
            }
        }
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut intermediates = Vec::with_capacity(self.layers.len());
        let mut x = self.embed(&prompt.token_ids);
        for layer in 0..self.layers.len() {
            states.push(x.clone());
            let (next, inter, _) =
                self.layer_forward(layer, &x, None, prompt.mask_position, false);
            intermediates.push(inter);
            x = next;
        }
        states.push(x);
        let prefix = Arc::new(Prefix {
            states,
            intermediates,
        });
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= PREFIX_CACHE_CAPACITY {
            cache.remove(0);
        }
        cache.push((key, Arc::clone(&prefix)));
        prefix
    }

    /// Run from the first scaled layer onward, reusing the unscaled prefix.
    fn tail(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
        record: bool,
    ) -> Result<TailRun> {
        self.check_prompt(prompt)?;
        scales.validate(&self.info)?;
        let prefix = self.prefix(prompt);
        let layer_count = self.layers.len();
        let start = scales.layers().min().unwrap_or(layer_count);

        let mut traces = Vec::new();
        let mut x = prefix.states[start].clone();
        for layer in start..layer_count {
            let (next, _, trace) = self.layer_forward(
                layer,
                &x,
                scales.get(layer),
                prompt.mask_position,
                record,
            );
            if let Some(t) = trace {
                traces.push(t);
            }
            x = next;
        }
        let final_row = if start == layer_count {
            prefix.states[layer_count].row(prompt.mask_position).to_owned()
        } else {
            x.row(prompt.mask_position).to_owned()
        };
        let (logits, head) = self.head_forward(&final_row.view(), record);
        Ok(TailRun {
            start,
            traces,
            head: head.unwrap_or(HeadTrace {
                t_pre_gelu: Array1::zeros(0),
                t_post_gelu: Array1::zeros(0),
            }),
            logits,
        })
    }

    /// Backward through one full encoder layer.
    fn layer_backward(&self, layer: usize, trace: &LayerTrace, d_out: &Array2<f64>) -> Array2<f64> {
        let eps = self.config.layer_norm_eps;
        let lw = &self.layers[layer];
        let heads = self.config.num_attention_heads;
        let head_dim = self.config.hidden_size / heads;
        let scale_factor = 1.0 / (head_dim as f64).sqrt();

        let d_sum2 = layernorm_backward_rows(&trace.sum2, &lw.ln2_g, d_out, eps);
        let mut d_x1 = d_sum2.clone();
        let d_inter = lw.ffn_out.backward(&d_sum2);
        let d_z = &d_inter * &trace.z.mapv(gelu_grad);
        d_x1 += &lw.ffn_in.backward(&d_z);

        let d_sum1 = layernorm_backward_rows(&trace.sum1, &lw.ln1_g, &d_x1, eps);
        let mut d_x = d_sum1.clone();
        let d_context = lw.attn_out.backward(&d_sum1);

        let mut d_q = Array2::zeros(trace.q.raw_dim());
        let mut d_k = Array2::zeros(trace.k.raw_dim());
        let mut d_v = Array2::zeros(trace.v.raw_dim());
        for hd in 0..heads {
            let cols = s![.., hd * head_dim..(hd + 1) * head_dim];
            let d_ctx_h = d_context.slice(cols);
            let vh = trace.v.slice(cols);
            let qh = trace.q.slice(cols);
            let kh = trace.k.slice(cols);
            let p = &trace.probs[hd];

            let d_p = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
            // Softmax backward: dS = P o (dP - rowsum(dP o P)).
            let row_dots = (&d_p * p).sum_axis(Axis(1));
            let mut d_scores = d_p;
            for (mut row, &dot) in d_scores.rows_mut().into_iter().zip(row_dots.iter()) {
                row.mapv_inplace(|v| v - dot);
            }
            let d_scores = &d_scores * p;
            d_q.slice_mut(cols)
                .assign(&(d_scores.dot(&kh) * scale_factor));
            d_k.slice_mut(cols)
                .assign(&(d_scores.t().dot(&qh) * scale_factor));
        }
        d_x += &lw.q.backward(&d_q);
        d_x += &lw.k.backward(&d_k);
        d_x += &lw.v.backward(&d_v);
        d_x
    }

    fn head_backward(&self, trace: &HeadTrace, target: usize) -> Array1<f64> {
        let eps = self.config.layer_norm_eps;
        let d_norm = self.head.decoder.row(target).to_owned();
        let d_post = layernorm_backward_row(
            &trace.t_post_gelu.view(),
            &self.head.ln_g,
            &d_norm.view(),
            eps,
        );
        let d_pre = &d_post * &trace.t_pre_gelu.mapv(gelu_grad);
        d_pre.dot(&self.head.transform.w.t())
    }
}

fn read_do_lower_case(dir: &Path, config: &BertConfig) -> bool {
    if let Some(flag) = config.do_lower_case {
        return flag;
    }
    if let Ok(text) = std::fs::read_to_string(dir.join("tokenizer_config.json")) {
        if let Ok(tc) = serde_json::from_str::<TokenizerConfig>(&text) {
            if let Some(flag) = tc.do_lower_case {
                return flag;
            }
        }
    }
    false
}

fn softmax_target(logits: &Array1<f64>, target: usize) -> TargetOutput {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    TargetOutput {
        logit: logits[target],
        prob: (logits[target] - max).exp() / denom,
    }
}

impl MaskedLm for BertModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn tokenize(&self, text: &str, target: &str) -> Result<TokenizedPrompt> {
        let mask_token = &self.info.mask_token;
        let parts: Vec<&str> = text.split(mask_token.as_str()).collect();
        match parts.len() {
            1 => {
                return Err(Error::PromptStructure(format!(
                    "prompt contains no {mask_token} placeholder"
                )))
            }
            2 => {}
            n => {
                return Err(Error::PromptStructure(format!(
                    "prompt contains {} {mask_token} placeholders, expected exactly 1",
                    n - 1
                )))
            }
        }
        let target = target.trim();
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target word".into()));
        }
        let target_pieces = self.tokenizer.tokenize_word(target);
        match target_pieces.len() {
            0 => return Err(Error::InvalidArgument("empty target word".into())),
            1 => {}
            n => {
                return Err(Error::MultiTokenTarget {
                    word: target.to_string(),
                    pieces: n,
                })
            }
        }
        let target_id = target_pieces[0];
        if self.tokenizer.token(target_id) == Some("[UNK]") {
            return Err(Error::InvalidArgument(format!(
                "target {target:?} is out of vocabulary"
            )));
        }

        let mut token_ids = vec![self.tokenizer.cls_id()];
        token_ids.extend(self.tokenizer.tokenize_segment(parts[0]));
        let mask_position = token_ids.len();
        token_ids.push(self.tokenizer.mask_id());
        token_ids.extend(self.tokenizer.tokenize_segment(parts[1]));
        token_ids.push(self.tokenizer.sep_id());

        let prompt = TokenizedPrompt {
            token_ids,
            mask_position,
            target_id,
        };
        self.check_prompt(&prompt)?;
        Ok(prompt)
    }

    fn scaled_forward_multi(
        &self,
        prompt: &TokenizedPrompt,
        scales: &LayerScales,
    ) -> Result<TargetOutput> {
        let run = self.tail(prompt, scales, false)?;
        Ok(softmax_target(&run.logits, prompt.target_id as usize))
    }

    fn grad_intermediate(
        &self,
        prompt: &TokenizedPrompt,
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
        let scales = LayerScales::uniform(layer, alpha, self.info.intermediate_dim);
        let run = self.tail(prompt, &scales, true)?;
        debug_assert_eq!(run.start, layer);

        // Seed: only the mask row of the final hidden state feeds the logit.
        let d_row = self.head_backward(&run.head, prompt.target_id as usize);
        let seq = prompt.token_ids.len();
        let mut d_x = Array2::zeros((seq, self.config.hidden_size));
        d_x.row_mut(prompt.mask_position).assign(&d_row);

        // Full backward through the layers above the hooked one.
        for (offset, trace) in run.traces.iter().enumerate().skip(1).rev() {
            d_x = self.layer_backward(layer + offset, trace, &d_x);
        }

        // At the hooked layer, stop at the intermediate vector itself: the
        // gradient flows through LN2 and the FFN output projection only.
        let trace = &run.traces[0];
        let lw = &self.layers[layer];
        let d_sum2 =
            layernorm_backward_rows(&trace.sum2, &lw.ln2_g, &d_x, self.config.layer_norm_eps);
        let d_inter = lw.ffn_out.backward(&d_sum2);
        Ok(d_inter.row(prompt.mask_position).to_vec())
    }

    fn capture_activations(&self, prompt: &TokenizedPrompt) -> Result<Vec<ActivationVector>> {
        self.check_prompt(prompt)?;
        let prefix = self.prefix(prompt);
        Ok(prefix
            .intermediates
            .iter()
            .enumerate()
            .map(|(layer, values)| ActivationVector {
                layer,
                values: values.clone(),
            })
            .collect())
    }
}

// -- safetensors loading ----------------------------------------------------

struct TensorSource<'a> {
    tensors: safetensors::SafeTensors<'a>,
}

impl<'a> TensorSource<'a> {
    fn raw(&self, names: &[String]) -> Result<(Vec<f64>, Vec<usize>)> {
        for name in names {
            if let Ok(view) = self.tensors.tensor(name) {
                let data = view.data();
                let values = match view.dtype() {
                    safetensors::Dtype::F32 => data
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect(),
                    safetensors::Dtype::F64 => data
                        .chunks_exact(8)
                        .map(|b| {
                            f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                        })
                        .collect(),
                    other => {
                        return Err(Error::Load(format!(
                            "tensor {name} has unsupported dtype {other:?}; convert the checkpoint to f32"
                        )))
                    }
                };
                return Ok((values, view.shape().to_vec()));
            }
        }
        Err(Error::Load(format!(
            "checkpoint lacks tensor {:?}",
            names.first().map(String::as_str).unwrap_or("?")
        )))
    }

    fn with_prefixes(base: &str) -> Vec<String> {
        vec![format!("bert.{base}"), base.to_string()]
    }

    fn mat(&self, bases: &[&str], shape: (usize, usize), transpose: bool) -> Result<Array2<f64>> {
        let names: Vec<String> = bases
            .iter()
            .flat_map(|b| Self::with_prefixes(b))
            .collect();
        let (values, found) = self.raw(&names)?;
        let stored = if transpose {
            (shape.1, shape.0)
        } else {
            shape
        };
        if found != vec![stored.0, stored.1] {
            return Err(Error::Load(format!(
                "tensor {:?} has shape {found:?}, expected {stored:?}",
                names[0]
            )));
        }
        let arr = Array2::from_shape_vec(stored, values)
            .map_err(|e| Error::Load(format!("tensor reshape failed: {e}")))?;
        Ok(if transpose { arr.t().to_owned() } else { arr })
    }

    fn vec(&self, bases: &[&str], len: usize) -> Result<Array1<f64>> {
        let names: Vec<String> = bases
            .iter()
            .flat_map(|b| Self::with_prefixes(b))
            .collect();
        let (values, found) = self.raw(&names)?;
        if found != vec![len] {
            return Err(Error::Load(format!(
                "tensor {:?} has shape {found:?}, expected [{len}]",
                names[0]
            )));
        }
        Ok(Array1::from_vec(values))
    }

    /// LayerNorm parameters come as either `.weight/.bias` or `.gamma/.beta`.
    fn vec_ln(&self, bases: &[&str], len: usize, weight: bool) -> Result<Array1<f64>> {
        let suffixes = if weight {
            ["weight", "gamma"]
        } else {
            ["bias", "beta"]
        };
        let expanded: Vec<String> = bases
            .iter()
            .flat_map(|b| suffixes.iter().map(move |s| format!("{b}.{s}")))
            .collect();
        let refs: Vec<&str> = expanded.iter().map(String::as_str).collect();
        self.vec(&refs, len)
    }

    /// HF stores linear weights `[out, in]`; we keep them `[in, out]`.
    fn linear(&self, base: &str, input: usize, output: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.mat(&[&format!("{base}.weight")], (input, output), true)?,
            b: self.vec(&[&format!("{base}.bias")], output)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MaskedLm;

    fn small() -> BertModel {
        BertModel::synthetic(3, 16, 2, 24, 20, 7).unwrap()
    }

    fn prompt(model: &BertModel) -> TokenizedPrompt {
        model.tokenize("tok5 tok6 [MASK] tok7", "tok9").unwrap()
    }

    #[test]
    fn tokenize_places_single_mask_between_specials() {
        let model = small();
        let p = prompt(&model);
        assert_eq!(p.token_ids[0], 2); // [CLS]
        assert_eq!(*p.token_ids.last().unwrap(), 3); // [SEP]
        assert_eq!(p.token_ids[p.mask_position], 4); // [MASK]
        assert_eq!(
            p.token_ids.iter().filter(|&&t| t == 4).count(),
            1,
            "exactly one mask id"
        );
    }

    #[test]
    fn tokenize_rejects_bad_structures() {
        let model = small();
        assert!(matches!(
            model.tokenize("no mask", "tok9"),
            Err(Error::PromptStructure(_))
        ));
        assert!(matches!(
            model.tokenize("[MASK] x [MASK]", "tok9"),
            Err(Error::PromptStructure(_))
        ));
        assert!(matches!(
            model.tokenize("a [MASK]", "zzzz"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn forward_is_deterministic_and_identity_scale_bit_exact() {
        let model = small();
        let p = prompt(&model);
        let a = model.forward(&p).unwrap();
        let b = model.forward(&p).unwrap();
        assert_eq!(a.logit.to_bits(), b.logit.to_bits());

        let ones = vec![1.0; model.info().intermediate_dim];
        for layer in 0..model.info().layer_count {
            let scaled = model.scaled_forward(&p, layer, &ones).unwrap();
            assert_eq!(a.logit.to_bits(), scaled.logit.to_bits(), "layer {layer}");
            assert_eq!(a.prob.to_bits(), scaled.prob.to_bits());
        }
    }

    #[test]
    fn capture_matches_identity_scaled_rerun() {
        let model = small();
        let p = prompt(&model);
        let acts = model.capture_activations(&p).unwrap();
        assert_eq!(acts.len(), 3);
        assert!(acts.iter().all(|a| a.values.len() == 24));
        let again = model.capture_activations(&p).unwrap();
        assert_eq!(acts, again);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let model = small();
        let p = prompt(&model);
        let acts = model.capture_activations(&p).unwrap();
        for (layer, act) in acts.iter().enumerate() {
            for &alpha in &[0.25, 1.0] {
                let grad = model.grad_intermediate(&p, layer, alpha).unwrap();
                let x = &act.values;
                let delta = 1e-5;
                for i in (0..model.info().intermediate_dim).step_by(5) {
                    if x[i].abs() < 1e-12 {
                        continue; // scale cannot move a zero activation
                    }
                    let mut up = vec![alpha; x.len()];
                    let mut down = vec![alpha; x.len()];
                    up[i] = alpha + delta / x[i];
                    down[i] = alpha - delta / x[i];
                    let f_up = model.scaled_forward(&p, layer, &up).unwrap().logit;
                    let f_down = model.scaled_forward(&p, layer, &down).unwrap().logit;
                    let fd = (f_up - f_down) / (2.0 * delta);
                    let tol = 1e-4 * grad[i].abs().max(fd.abs()).max(1e-3);
                    assert!(
                        (grad[i] - fd).abs() <= tol,
                        "layer {layer} alpha {alpha} i {i}: {} vs {fd}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zeroing_everything_reaches_the_layer_baseline() {
        let model = small();
        let p = prompt(&model);
        let zeros = vec![0.0; model.info().intermediate_dim];
        let out = model.scaled_forward(&p, 1, &zeros).unwrap();
        assert!(out.logit.is_finite());
        let base = model.forward(&p).unwrap();
        assert_ne!(out.logit.to_bits(), base.logit.to_bits());
    }

    #[test]
    fn multi_layer_scales_compose() {
        let model = small();
        let p = prompt(&model);
        let dim = model.info().intermediate_dim;
        let mut scales = LayerScales::new();
        scales.set(0, vec![0.5; dim]);
        scales.set(2, vec![0.0; dim]);
        let out = model.scaled_forward_multi(&p, &scales).unwrap();
        assert!(out.logit.is_finite());
        assert!(out.prob > 0.0 && out.prob < 1.0);
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = BertModel::synthetic(2, 8, 2, 12, 16, 3).unwrap();
        let b = BertModel::synthetic(2, 8, 2, 12, 16, 3).unwrap();
        let pa = a.tokenize("tok5 [MASK]", "tok6").unwrap();
        let pb = b.tokenize("tok5 [MASK]", "tok6").unwrap();
        assert_eq!(
            a.forward(&pa).unwrap().logit.to_bits(),
            b.forward(&pb).unwrap().logit.to_bits()
        );
    }

    #[test]
    fn checkpoint_round_trip_matches_in_memory_model() {
        let model = small();
        let dir = tempfile::tempdir().unwrap();
        model.export_checkpoint(dir.path()).unwrap();

        let loaded = BertModel::load(dir.path()).unwrap();
        assert_eq!(loaded.info().layer_count, 3);
        assert_eq!(loaded.info().intermediate_dim, 24);
        assert_eq!(loaded.info().vocab_size, 20);

        let p = prompt(&model);
        let q = loaded.tokenize("tok5 tok6 [MASK] tok7", "tok9").unwrap();
        assert_eq!(p, q);

        // Weights pass through f32 on disk, so compare at f32 precision.
        let a = model.forward(&p).unwrap();
        let b = loaded.forward(&q).unwrap();
        assert!(
            (a.logit - b.logit).abs() < 1e-3,
            "{} vs {}",
            a.logit,
            b.logit
        );
        assert!((a.prob - b.prob).abs() < 1e-4);

        let ga = model.grad_intermediate(&p, 1, 0.5).unwrap();
        let gb = loaded.grad_intermediate(&q, 1, 0.5).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-3 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn load_rejects_unsupported_families_and_missing_files() {
        let model = small();
        let dir = tempfile::tempdir().unwrap();
        model.export_checkpoint(dir.path()).unwrap();

        // Unsupported architecture reports a capability error.
        let config_path = dir.path().join("config.json");
        let mut config: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
        config["model_type"] = "gpt2".into();
        std::fs::write(&config_path, config.to_string()).unwrap();
        assert!(matches!(
            BertModel::load(dir.path()),
            Err(Error::Capability(_))
        ));

        // Missing weights report a load error.
        config["model_type"] = "bert".into();
        std::fs::write(&config_path, config.to_string()).unwrap();
        std::fs::remove_file(dir.path().join("model.safetensors")).unwrap();
        assert!(matches!(BertModel::load(dir.path()), Err(Error::Load(_))));
    }
}
