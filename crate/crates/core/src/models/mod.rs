//! Classifiers: a Kim-style CNN and a BiLSTM-CNN over frozen cross-lingual
//! word embeddings, and a BERT-style multilingual transformer.
//!
//! Every architecture maps one text to a pair of logits. Training, fine-tuning
//! and prediction are shared and live in [`train`].

mod bilstm;
mod checkpoint;
mod cnn;
mod train;
pub mod transformer;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label};
use crate::embeddings::{encode, tokenize, EmbeddingError, EmbeddingTable, EncodedExample};
use crate::evaluation::EvalError;
use crate::nn::{dropout_mask, softmax_in_place, Gradients, ParamId, ParamSet, Tape, Tensor, Var};

pub use bilstm::BiLstmConfig;
pub use cnn::CnnConfig;
pub use train::{fine_tune, train, StageRecord, TrainingHyperparams};
pub use transformer::{BertConfig, TransformerConfig, WordPiece};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("filter size {size} exceeds max_len {max_len}")]
    FilterTooLong { size: usize, max_len: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint {0} not found locally or in the registry")]
    MissingCheckpoint(String),
    #[error("checkpoint {0} is not multilingual (needs English and German)")]
    NotMultilingual(String),
    #[error("example {id} has no label")]
    Unlabeled { id: String },
    #[error("development set is empty")]
    EmptyDev,
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
        diagnostics: String,
    },
    #[error("cannot encode example {id}: {message}")]
    Encoding { id: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: &Path, message: impl Into<String>) -> Self {
        ModelError::Checkpoint {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Cnn,
    Bilstm,
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Cnn, Architecture::Bilstm, Architecture::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Cnn => "cnn",
            Architecture::Bilstm => "bilstm",
            Architecture::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" => Ok(Architecture::Cnn),
            "bilstm" | "bilstm-cnn" | "bilstm_cnn" => Ok(Architecture::Bilstm),
            "transformer" | "mbert" => Ok(Architecture::Transformer),
            other => Err(ModelError::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Which embedding table a vector model reads: the training language or
/// the language it is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    Train,
    Predict,
}

pub(crate) enum Input {
    Words(EncodedExample, Side),
    Subwords(Vec<usize>),
}

pub(crate) struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub(crate) fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape<'_>, v: Var) -> Var {
        if self.rate <= 0.0 {
            return v;
        }
        let mask = dropout_mask(tape.value(v).len(), self.rate, &mut self.rng);
        tape.dropout(v, mask)
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape<'_>, v: Var, dropout: &mut Option<Dropout>) -> Var {
    match dropout {
        Some(d) => d.apply(tape, v),
        None => v,
    }
}

/// One architecture's forward pass.
pub(crate) trait Classifier {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn encode(&self, text: &str, side: Side) -> Result<Input, ModelError>;
    /// `1 x 2` logits.
    fn logits<'a>(&'a self, tape: &mut Tape<'a>, input: &Input, dropout: &mut Option<Dropout>) -> Var;
    fn probe(&self, input: &Input) -> ShapeProbe;
    fn uses_class_weights(&self) -> bool {
        true
    }
}

/// Intermediate shapes of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeProbe {
    /// Per-position features before pooling (`rows x width`), for the
    /// recurrent and transformer models.
    pub sequence: Option<(usize, usize)>,
    /// Width of the pooled vector.
    pub pooled: usize,
}

/// Training-language and inference-language tables of a vector model.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tables {
    pub(crate) train: EmbeddingTable,
    pub(crate) predict: Option<EmbeddingTable>,
}

impl Tables {
    pub(crate) fn new(table: EmbeddingTable) -> Self {
        Tables {
            train: table,
            predict: None,
        }
    }

    pub(crate) fn get(&self, side: Side) -> &EmbeddingTable {
        match side {
            Side::Train => &self.train,
            Side::Predict => self.predict.as_ref().unwrap_or(&self.train),
        }
    }

    pub(crate) fn encode(&self, text: &str, side: Side, max_len: usize) -> Input {
        Input::Words(encode(&tokenize(text), self.get(side), max_len), side)
    }

    /// Frozen lookup: the rows come in as a constant, so no gradient ever
    /// reaches the table.
    pub(crate) fn lookup(&self, tape: &mut Tape<'_>, enc: &EncodedExample, side: Side, rows: usize) -> Var {
        let table = self.get(side);
        let dim = table.dimension();
        let mut data = Vec::with_capacity(rows * dim);
        for &i in &enc.indices[..rows] {
            data.extend_from_slice(table.vector(i));
        }
        tape.constant(Tensor::from_vec(rows, dim, data))
    }

    fn replace(&mut self, table: EmbeddingTable, both: bool) -> Result<(), ModelError> {
        self.train.ensure_same_dimension(&table)?;
        if both {
            self.train = table;
            self.predict = None;
        } else {
            self.predict = Some(table);
        }
        Ok(())
    }
}

/// Convolutions over row windows followed by global max-pooling, for every
/// `(kernel, weight, bias)` triple; pooled vectors are concatenated.
///
/// Windows start inside the first `true_len` rows only, so padding never
/// contributes a window of its own.
pub(crate) fn conv_pool(
    tape: &mut Tape<'_>,
    x: Var,
    true_len: usize,
    convs: &[(usize, ParamId, ParamId)],
) -> Var {
    let rows = tape.value(x).rows;
    let mut pooled = Vec::with_capacity(convs.len());
    for &(k, w, b) in convs {
        let count = (true_len.saturating_sub(k) + 1).min(rows + 1 - k);
        let win = tape.windows(x, k, count);
        let (w, b) = (tape.param(w), tape.param(b));
        let z = tape.matmul(win, w);
        let z = tape.add_row(z, b);
        let z = tape.relu(z);
        pooled.push(tape.max_rows(z));
    }
    tape.concat_cols(&pooled)
}

#[derive(Debug, Clone)]
enum Net {
    Cnn(cnn::CnnNet),
    Bilstm(bilstm::BiLstmNet),
    Transformer(Box<transformer::TransformerNet>),
}

/// Training history of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: Vec<StageRecord>,
}

/// A classifier with its parameter state and training history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    net: Net,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub probabilities: [f64; 2],
}

pub fn build_cnn(cfg: &CnnConfig, table: &EmbeddingTable) -> Result<TrainedModel, ModelError> {
    Ok(TrainedModel::new(Net::Cnn(cnn::CnnNet::build(cfg, table.clone())?)))
}

pub fn build_bilstm_cnn(cfg: &BiLstmConfig, table: &EmbeddingTable) -> Result<TrainedModel, ModelError> {
    Ok(TrainedModel::new(Net::Bilstm(bilstm::BiLstmNet::build(cfg, table.clone())?)))
}

/// Load a pretrained multilingual encoder and put a fresh two-way head on it.
pub fn build_transformer_classifier(cfg: &TransformerConfig) -> Result<TrainedModel, ModelError> {
    let net = transformer::TransformerNet::from_pretrained(cfg)?;
    Ok(TrainedModel::new(Net::Transformer(Box::new(net))))
}

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture: Architecture,
    config: serde_json::Value,
    provenance: Provenance,
}

impl TrainedModel {
    fn new(net: Net) -> Self {
        TrainedModel {
            net,
            provenance: Provenance::default(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match &self.net {
            Net::Cnn(_) => Architecture::Cnn,
            Net::Bilstm(_) => Architecture::Bilstm,
            Net::Transformer(_) => Architecture::Transformer,
        }
    }

    pub(crate) fn classifier(&self) -> &dyn Classifier {
        match &self.net {
            Net::Cnn(n) => n,
            Net::Bilstm(n) => n,
            Net::Transformer(n) => n.as_ref(),
        }
    }

    pub(crate) fn classifier_mut(&mut self) -> &mut dyn Classifier {
        match &mut self.net {
            Net::Cnn(n) => n,
            Net::Bilstm(n) => n,
            Net::Transformer(n) => n.as_mut(),
        }
    }

    pub fn parameters(&self) -> &ParamSet {
        self.classifier().params()
    }

    pub fn parameters_mut(&mut self) -> &mut ParamSet {
        self.classifier_mut().params_mut()
    }

    fn tables(&self) -> Option<&Tables> {
        match &self.net {
            Net::Cnn(n) => Some(&n.tables),
            Net::Bilstm(n) => Some(&n.tables),
            Net::Transformer(_) => None,
        }
    }

    fn tables_mut(&mut self) -> Option<&mut Tables> {
        match &mut self.net {
            Net::Cnn(n) => Some(&mut n.tables),
            Net::Bilstm(n) => Some(&mut n.tables),
            Net::Transformer(_) => None,
        }
    }

    /// Training-language embedding table (vector models only).
    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.tables().map(|t| &t.train)
    }

    /// Table used at prediction time (vector models only).
    pub fn inference_embeddings(&self) -> Option<&EmbeddingTable> {
        self.tables().map(|t| t.get(Side::Predict))
    }

    /// Switch a vector model to another language of the same embedding
    /// space, for both training and prediction.
    pub fn swap_embeddings(&mut self, table: EmbeddingTable) -> Result<(), ModelError> {
        match self.tables_mut() {
            Some(t) => t.replace(table, true),
            None => Err(ModelError::Config("the transformer has no word-vector table".into())),
        }
    }

    /// Keep training on the current table but predict through `table`.
    /// This is the zero-shot setting: train on English, predict German.
    pub fn set_inference_embeddings(&mut self, table: EmbeddingTable) -> Result<(), ModelError> {
        match self.tables_mut() {
            Some(t) => t.replace(table, false),
            None => Err(ModelError::Config("the transformer has no word-vector table".into())),
        }
    }

    /// Width of the vector fed to the final dense/softmax part.
    pub fn penultimate_width(&self) -> usize {
        match &self.net {
            Net::Cnn(n) => n.pooled_width(),
            Net::Bilstm(n) => n.pooled_width(),
            Net::Transformer(n) => n.bert.hidden_size,
        }
    }

    /// Number of scalars in the classification head of the transformer.
    pub fn head_parameter_count(&self) -> Option<usize> {
        match &self.net {
            Net::Transformer(n) => Some(n.head_parameter_count()),
            _ => None,
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        match &self.net {
            Net::Cnn(n) => serde_json::to_value(&n.cfg),
            Net::Bilstm(n) => serde_json::to_value(&n.cfg),
            Net::Transformer(n) => serde_json::to_value(&n.cfg),
        }
        .expect("config serializes")
    }

    pub fn shape_probe(&self, text: &str) -> Result<ShapeProbe, ModelError> {
        let clf = self.classifier();
        Ok(clf.probe(&clf.encode(text, Side::Predict)?))
    }

    pub fn probabilities(&self, text: &str) -> Result<[f64; 2], ModelError> {
        let clf = self.classifier();
        let input = clf.encode(text, Side::Predict)?;
        Ok(probabilities(clf, &input))
    }

    /// Inference with dropout disabled. Failures are reported per example.
    pub fn predict(&self, data: &Dataset) -> Vec<Result<Prediction, ModelError>> {
        let clf = self.classifier();
        data.iter()
            .map(|e| {
                let input = clf.encode(&e.text, Side::Predict).map_err(|err| ModelError::Encoding {
                    id: e.id.clone(),
                    message: err.to_string(),
                })?;
                let probs = probabilities(clf, &input);
                Ok(Prediction {
                    id: e.id.clone(),
                    label: argmax(probs),
                    probabilities: probs,
                })
            })
            .collect()
    }

    /// Labels for every example, failing on the first encoding error.
    pub fn predict_labels(&self, data: &Dataset) -> Result<Vec<Label>, ModelError> {
        self.predict(data)
            .into_iter()
            .map(|p| p.map(|p| p.label))
            .collect()
    }

    /// Class-weighted loss of `data` without dropout, with its gradient.
    /// Returns `None` when the weights of all examples sum to zero.
    pub fn weighted_loss_and_gradient(
        &self,
        data: &Dataset,
        weights: [f64; 2],
    ) -> Result<Option<(f64, Gradients)>, ModelError> {
        let clf = self.classifier();
        let mut inputs = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for e in data {
            let label = e.label.ok_or_else(|| ModelError::Unlabeled { id: e.id.clone() })?;
            inputs.push(clf.encode(&e.text, Side::Train)?);
            targets.push(label.index());
        }
        let refs: Vec<&Input> = inputs.iter().collect();
        let mut tape = Tape::new(clf.params());
        let mut none = None;
        let Some(loss) = train::batch_loss(clf, &mut tape, &refs, &targets, weights, &mut none) else {
            return Ok(None);
        };
        let value = tape.value(loss).data[0];
        Ok(Some((value, tape.backward(loss))))
    }

    /// Write `manifest.json` plus the architecture's parameter files.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        match &self.net {
            Net::Cnn(n) => checkpoint::save_vector_model(dir, &n.params, &n.tables)?,
            Net::Bilstm(n) => checkpoint::save_vector_model(dir, &n.params, &n.tables)?,
            Net::Transformer(n) => n.save(dir)?,
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            architecture: self.architecture(),
            config: self.config_json(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| ModelError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| ModelError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ModelError::checkpoint(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ModelError::checkpoint(
                &path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let bad_config = |e: serde_json::Error| ModelError::checkpoint(&path, e.to_string());
        let net = match manifest.architecture {
            Architecture::Cnn => {
                let cfg: CnnConfig = serde_json::from_value(manifest.config).map_err(bad_config)?;
                let (params, tables) = checkpoint::load_vector_model(dir)?;
                Net::Cnn(cnn::CnnNet::restore(cfg, params, tables)?)
            }
            Architecture::Bilstm => {
                let cfg: BiLstmConfig = serde_json::from_value(manifest.config).map_err(bad_config)?;
                let (params, tables) = checkpoint::load_vector_model(dir)?;
                Net::Bilstm(bilstm::BiLstmNet::restore(cfg, params, tables)?)
            }
            Architecture::Transformer => {
                let cfg: TransformerConfig = serde_json::from_value(manifest.config).map_err(bad_config)?;
                Net::Transformer(Box::new(transformer::TransformerNet::load_trained(cfg, dir)?))
            }
        };
        Ok(TrainedModel {
            net,
            provenance: manifest.provenance,
        })
    }
}

pub(crate) fn probabilities(clf: &dyn Classifier, input: &Input) -> [f64; 2] {
    let mut tape = Tape::new(clf.params());
    let mut none = None;
    let logits = clf.logits(&mut tape, input, &mut none);
    let mut p = tape.value(logits).data.clone();
    softmax_in_place(&mut p);
    [p[0], p[1]]
}

/// Ties go to noHate.
pub fn argmax(p: [f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Hate
    } else {
        Label::NoHate
    }
}

/// Resolve a registry directory entry for an identifier such as
/// `org/model-name`.
pub(crate) fn registry_path(registry: &Path, identifier: &str) -> PathBuf {
    identifier
        .split('/')
        .fold(registry.to_path_buf(), |p, part| p.join(part))
}
