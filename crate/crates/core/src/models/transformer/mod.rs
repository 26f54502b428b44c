//! BERT-style encoder with a two-way classification head.
//!
//! Checkpoints are read from the usual on-disk layout of that ecosystem: a
//! directory holding `config.json`, `vocab.txt` and `model.safetensors`.
//! Tensor names may carry a `bert.` prefix. Linear weights keep their
//! `out x in` layout and are applied as `x * W^T`.

mod wordpiece;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_safetensors, write_safetensors};
use super::{maybe_dropout, registry_path, Classifier, Dropout, Input, ModelError, ShapeProbe, Side};
use crate::nn::{ParamId, ParamSet, Tape, Tensor, Var};

pub use wordpiece::{WordPiece, CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, UNK_TOKEN};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const TOKENIZER_CONFIG_FILE: &str = "tokenizer_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    /// Local checkpoint directory, or a name resolved inside `registry_dir`.
    pub model_identifier: String,
    pub dropout: f64,
    pub max_subword_len: usize,
    pub registry_dir: Option<PathBuf>,
    /// Overrides the checkpoint's own casing setting.
    pub lowercase: Option<bool>,
    /// Seed for the classification head.
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            model_identifier: "bert-base-multilingual-cased".into(),
            dropout: 0.1,
            max_subword_len: 128,
            registry_dir: None,
            lowercase: None,
            seed: 0,
        }
    }
}

fn default_type_vocab() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_act() -> String {
    "gelu".into()
}

/// Encoder hyperparameters as stored in `config.json`. Unknown keys are
/// carried through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    /// Language codes covered by pretraining, when the checkpoint lists them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub languages: Vec<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl BertConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_size == 0 || self.num_attention_heads == 0 {
            return Err(ModelError::Config("hidden size and head count must be positive".into()));
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if !matches!(self.hidden_act.as_str(), "gelu" | "relu") {
            return Err(ModelError::Config(format!("unsupported activation {}", self.hidden_act)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    inter: (ParamId, ParamId),
    out: (ParamId, ParamId),
    out_norm: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct BertIds {
    word: ParamId,
    position: ParamId,
    token_type: ParamId,
    emb_norm: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    pooler: Option<(ParamId, ParamId)>,
    classifier: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerNet {
    pub(crate) cfg: TransformerConfig,
    pub(crate) bert: BertConfig,
    tokenizer: WordPiece,
    params: ParamSet,
    ids: BertIds,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ModelError::checkpoint(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text).map_err(|e| ModelError::io(path, e))
}

/// Locate the checkpoint directory for `cfg`.
pub fn resolve_checkpoint(cfg: &TransformerConfig) -> Result<PathBuf, ModelError> {
    let local = PathBuf::from(&cfg.model_identifier);
    if local.is_dir() {
        return Ok(local);
    }
    if let Some(registry) = &cfg.registry_dir {
        let p = registry_path(registry, &cfg.model_identifier);
        if p.is_dir() {
            return Ok(p);
        }
    }
    Err(ModelError::MissingCheckpoint(cfg.model_identifier.clone()))
}

/// A checkpoint qualifies when its config lists both English and German,
/// or, without a language list, when its name marks it as multilingual.
pub fn is_multilingual(identifier: &str, dir: &Path, bert: &BertConfig) -> bool {
    if !bert.languages.is_empty() {
        let has = |code: &str| bert.languages.iter().any(|l| l.eq_ignore_ascii_case(code));
        return has("en") && has("de");
    }
    let dir_name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("");
    let names = format!("{identifier} {dir_name}").to_lowercase();
    names.contains("multilingual") || names.contains("xlm")
}

#[derive(Serialize, Deserialize, Default)]
struct TokenizerConfig {
    #[serde(default)]
    do_lower_case: Option<bool>,
}

fn expected_shapes(bert: &BertConfig) -> Vec<(String, (usize, usize))> {
    let (h, i) = (bert.hidden_size, bert.intermediate_size);
    let mut out = vec![
        ("embeddings.word_embeddings.weight".to_string(), (bert.vocab_size, h)),
        ("embeddings.position_embeddings.weight".into(), (bert.max_position_embeddings, h)),
        ("embeddings.token_type_embeddings.weight".into(), (bert.type_vocab_size, h)),
        ("embeddings.LayerNorm.weight".into(), (1, h)),
        ("embeddings.LayerNorm.bias".into(), (1, h)),
    ];
    for l in 0..bert.num_hidden_layers {
        let p = format!("encoder.layer.{l}");
        for (name, shape) in [
            ("attention.self.query.weight", (h, h)),
            ("attention.self.query.bias", (1, h)),
            ("attention.self.key.weight", (h, h)),
            ("attention.self.key.bias", (1, h)),
            ("attention.self.value.weight", (h, h)),
            ("attention.self.value.bias", (1, h)),
            ("attention.output.dense.weight", (h, h)),
            ("attention.output.dense.bias", (1, h)),
            ("attention.output.LayerNorm.weight", (1, h)),
            ("attention.output.LayerNorm.bias", (1, h)),
            ("intermediate.dense.weight", (i, h)),
            ("intermediate.dense.bias", (1, i)),
            ("output.dense.weight", (h, i)),
            ("output.dense.bias", (1, h)),
            ("output.LayerNorm.weight", (1, h)),
            ("output.LayerNorm.bias", (1, h)),
        ] {
            out.push((format!("{p}.{name}"), shape));
        }
    }
    out
}

const POOLER: [&str; 2] = ["pooler.dense.weight", "pooler.dense.bias"];
const CLASSIFIER: [&str; 2] = ["classifier.weight", "classifier.bias"];

/// Fetch a tensor by its canonical name, accepting a `bert.` prefix and the
/// legacy `gamma`/`beta` names of layer norms.
fn take(tensors: &mut HashMap<String, Tensor>, name: &str) -> Option<Tensor> {
    let mut candidates = vec![name.to_string(), format!("bert.{name}")];
    if let Some(stem) = name.strip_suffix("LayerNorm.weight") {
        candidates.push(format!("{stem}LayerNorm.gamma"));
        candidates.push(format!("bert.{stem}LayerNorm.gamma"));
    }
    if let Some(stem) = name.strip_suffix("LayerNorm.bias") {
        candidates.push(format!("{stem}LayerNorm.beta"));
        candidates.push(format!("bert.{stem}LayerNorm.beta"));
    }
    candidates.iter().find_map(|c| tensors.remove(c))
}

fn param_name(canonical: &str) -> String {
    if canonical.starts_with("classifier.") {
        canonical.to_string()
    } else {
        format!("bert.{canonical}")
    }
}

/// Randomly initialised encoder tensors under canonical names, following
/// the usual scheme: normal(0, 0.02) matrices, zero biases, unit norms.
pub fn init_encoder(bert: &BertConfig, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut out = Vec::new();
    let mut shapes = expected_shapes(bert);
    shapes.push((POOLER[0].into(), (bert.hidden_size, bert.hidden_size)));
    shapes.push((POOLER[1].into(), (1, bert.hidden_size)));
    for (name, (r, c)) in shapes {
        let t = if name.ends_with("LayerNorm.weight") {
            Tensor::from_vec(r, c, vec![1.0; r * c])
        } else if r == 1 {
            Tensor::zeros(r, c)
        } else {
            Tensor::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
        };
        out.push((name, t));
    }
    out
}

/// Write a pretrained-encoder directory in the standard layout.
pub fn write_checkpoint(
    dir: &Path,
    bert: &BertConfig,
    vocab: &[String],
    lowercase: bool,
    tensors: &[(String, Tensor)],
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), bert)?;
    write_json(
        &dir.join(TOKENIZER_CONFIG_FILE),
        &TokenizerConfig {
            do_lower_case: Some(lowercase),
        },
    )?;
    WordPiece::new(vocab.to_vec(), lowercase)?.save(&dir.join(VOCAB_FILE))?;
    write_safetensors(
        &dir.join(WEIGHTS_FILE),
        tensors.iter().map(|(n, t)| (param_name(n), t)),
    )
}

impl TransformerNet {
    pub(crate) fn from_pretrained(cfg: &TransformerConfig) -> Result<Self, ModelError> {
        let dir = resolve_checkpoint(cfg)?;
        let bert: BertConfig = read_json(&dir.join(CONFIG_FILE))?;
        if !is_multilingual(&cfg.model_identifier, &dir, &bert) {
            return Err(ModelError::NotMultilingual(cfg.model_identifier.clone()));
        }
        Self::from_dir(cfg.clone(), &dir, bert, true)
    }

    pub(crate) fn load_trained(cfg: TransformerConfig, dir: &Path) -> Result<Self, ModelError> {
        let bert: BertConfig = read_json(&dir.join(CONFIG_FILE))?;
        Self::from_dir(cfg, dir, bert, false)
    }

    fn from_dir(cfg: TransformerConfig, dir: &Path, bert: BertConfig, fresh_head: bool) -> Result<Self, ModelError> {
        bert.validate()?;
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        if cfg.max_subword_len < 2 {
            return Err(ModelError::Config("max_subword_len must leave room for [CLS] and [SEP]".into()));
        }
        let tok_cfg_path = dir.join(TOKENIZER_CONFIG_FILE);
        let tok_cfg: TokenizerConfig = if tok_cfg_path.exists() {
            read_json(&tok_cfg_path)?
        } else {
            TokenizerConfig::default()
        };
        let lowercase = cfg
            .lowercase
            .or(tok_cfg.do_lower_case)
            .unwrap_or_else(|| cfg.model_identifier.to_lowercase().contains("uncased"));
        let tokenizer = WordPiece::from_file(&dir.join(VOCAB_FILE), lowercase)?;
        if tokenizer.len() > bert.vocab_size {
            return Err(ModelError::checkpoint(
                dir,
                format!("vocabulary has {} entries, config says {}", tokenizer.len(), bert.vocab_size),
            ));
        }

        let weights = dir.join(WEIGHTS_FILE);
        if !weights.exists() {
            return Err(ModelError::checkpoint(dir, format!("{WEIGHTS_FILE} is missing")));
        }
        let mut tensors: HashMap<String, Tensor> = read_safetensors(&weights)?.into_iter().collect();
        let mut params = ParamSet::new();
        let mut shapes = expected_shapes(&bert);
        let has_pooler = tensors.keys().any(|k| k.ends_with(POOLER[0]));
        if has_pooler {
            shapes.push((POOLER[0].into(), (bert.hidden_size, bert.hidden_size)));
            shapes.push((POOLER[1].into(), (1, bert.hidden_size)));
        }
        if !fresh_head {
            shapes.push((CLASSIFIER[0].into(), (2, bert.hidden_size)));
            shapes.push((CLASSIFIER[1].into(), (1, 2)));
        }
        for (name, shape) in shapes {
            let t = take(&mut tensors, &name)
                .ok_or_else(|| ModelError::checkpoint(&weights, format!("tensor {name} is missing")))?;
            if t.shape() != shape {
                return Err(ModelError::checkpoint(
                    &weights,
                    format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            params.insert(param_name(&name), t);
        }
        if fresh_head {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let normal = Normal::new(0.0, 0.02).expect("valid normal");
            let h = bert.hidden_size;
            let w = (0..2 * h).map(|_| normal.sample(&mut rng)).collect();
            params.insert(CLASSIFIER[0], Tensor::from_vec(2, h, w));
            params.insert(CLASSIFIER[1], Tensor::zeros(1, 2));
        }
        let ids = Self::ids(&bert, &params, has_pooler);
        Ok(TransformerNet {
            cfg,
            bert,
            tokenizer,
            params,
            ids,
        })
    }

    fn ids(bert: &BertConfig, params: &ParamSet, has_pooler: bool) -> BertIds {
        let id = |n: &str| params.id(&param_name(n)).expect("parameter inserted");
        let pair = |stem: &str, w: &str, b: &str| (id(&format!("{stem}.{w}")), id(&format!("{stem}.{b}")));
        let layers = (0..bert.num_hidden_layers)
            .map(|l| {
                let p = format!("encoder.layer.{l}");
                LayerIds {
                    q: pair(&format!("{p}.attention.self.query"), "weight", "bias"),
                    k: pair(&format!("{p}.attention.self.key"), "weight", "bias"),
                    v: pair(&format!("{p}.attention.self.value"), "weight", "bias"),
                    attn_out: pair(&format!("{p}.attention.output.dense"), "weight", "bias"),
                    attn_norm: pair(&format!("{p}.attention.output.LayerNorm"), "weight", "bias"),
                    inter: pair(&format!("{p}.intermediate.dense"), "weight", "bias"),
                    out: pair(&format!("{p}.output.dense"), "weight", "bias"),
                    out_norm: pair(&format!("{p}.output.LayerNorm"), "weight", "bias"),
                }
            })
            .collect();
        BertIds {
            word: id("embeddings.word_embeddings.weight"),
            position: id("embeddings.position_embeddings.weight"),
            token_type: id("embeddings.token_type_embeddings.weight"),
            emb_norm: pair("embeddings.LayerNorm", "weight", "bias"),
            layers,
            pooler: has_pooler.then(|| pair("pooler.dense", "weight", "bias")),
            classifier: (id(CLASSIFIER[0]), id(CLASSIFIER[1])),
        }
    }

    pub(crate) fn head_parameter_count(&self) -> usize {
        self.params.get(self.ids.classifier.0).len() + self.params.get(self.ids.classifier.1).len()
    }

    pub(crate) fn save(&self, dir: &Path) -> Result<(), ModelError> {
        write_json(&dir.join(CONFIG_FILE), &self.bert)?;
        write_json(
            &dir.join(TOKENIZER_CONFIG_FILE),
            &TokenizerConfig {
                do_lower_case: Some(self.tokenizer.lowercase()),
            },
        )?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))?;
        write_safetensors(
            &dir.join(WEIGHTS_FILE),
            self.params.iter().map(|(_, n, t)| (n.to_string(), t)),
        )
    }

    fn linear(tape: &mut Tape<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let (w, b) = (tape.param(w), tape.param(b));
        let z = tape.matmul_bt(x, w);
        tape.add_row(z, b)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let (g, b) = (tape.param(g), tape.param(b));
        tape.layer_norm(x, g, b, self.bert.layer_norm_eps)
    }

    fn layer(&self, tape: &mut Tape<'_>, x: Var, ids: &LayerIds) -> Var {
        let heads = self.bert.num_attention_heads;
        let dh = self.bert.hidden_size / heads;
        let q = Self::linear(tape, x, ids.q);
        let k = Self::linear(tape, x, ids.k);
        let v = Self::linear(tape, x, ids.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s);
            contexts.push(tape.matmul(p, vh));
        }
        let ctx = if heads == 1 { contexts[0] } else { tape.concat_cols(&contexts) };
        let a = Self::linear(tape, ctx, ids.attn_out);
        let a = tape.add(a, x);
        let x1 = self.norm(tape, a, ids.attn_norm);
        let i = Self::linear(tape, x1, ids.inter);
        let i = if self.bert.hidden_act == "relu" { tape.relu(i) } else { tape.gelu(i) };
        let o = Self::linear(tape, i, ids.out);
        let o = tape.add(o, x1);
        self.norm(tape, o, ids.out_norm)
    }
}

impl TransformerNet {
    /// Final hidden states and the pooled `[CLS]` vector.
    fn features(&self, tape: &mut Tape<'_>, input: &Input) -> (Var, Var) {
        let Input::Subwords(ids) = input else {
            panic!("transformer expects subword ids");
        };
        let n = ids.len();
        let positions: Vec<usize> = (0..n).collect();
        let word = tape.param(self.ids.word);
        let pos = tape.param(self.ids.position);
        let typ = tape.param(self.ids.token_type);
        let we = tape.gather(word, ids);
        let pe = tape.gather(pos, &positions);
        let te = tape.gather(typ, &vec![0; n]);
        let e = tape.add(we, pe);
        let e = tape.add(e, te);
        let mut x = self.norm(tape, e, self.ids.emb_norm);
        for layer in &self.ids.layers {
            x = self.layer(tape, x, layer);
        }
        let cls = tape.slice_rows(x, 0, 1);
        let pooled = match self.ids.pooler {
            Some(p) => {
                let z = Self::linear(tape, cls, p);
                tape.tanh(z)
            }
            None => cls,
        };
        (x, pooled)
    }
}

impl Classifier for TransformerNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn encode(&self, text: &str, _side: Side) -> Result<Input, ModelError> {
        let max_len = self.cfg.max_subword_len.min(self.bert.max_position_embeddings);
        Ok(Input::Subwords(self.tokenizer.encode(text, max_len)))
    }

    fn probe(&self, input: &Input) -> ShapeProbe {
        let mut tape = Tape::new(&self.params);
        let (seq, pooled) = self.features(&mut tape, input);
        ShapeProbe {
            sequence: Some(tape.value(seq).shape()),
            pooled: tape.value(pooled).cols,
        }
    }

    fn logits<'a>(&'a self, tape: &mut Tape<'a>, input: &Input, dropout: &mut Option<Dropout>) -> Var {
        let (_, pooled) = self.features(tape, input);
        let pooled = maybe_dropout(tape, pooled, dropout);
        Self::linear(tape, pooled, self.ids.classifier)
    }

    fn uses_class_weights(&self) -> bool {
        false
    }
}
