//! Config-driven runs of the three experiment families: cross-lingual
//! zero-shot training, bootstrapping rounds and monolingual imbalance
//! sweeps.
//!
//! Every stage writes its artifacts below `out_dir`. Trained checkpoints are
//! cached under a content hash of everything that determines them, so a
//! re-run only retrains what changed. Reports and dataset sidecars carry the
//! config hash and the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bootstrap::{self, audit_against_gold, bootstrap_rounds, BootstrapError, Ensemble};
use crate::corpus::{
    preprocess_forum_text, read_forum_dump, read_germeval, read_stormfront, read_tsv, relabel_germeval,
    relabel_stormfront, split_english, split_german, write_tsv, ClassCounts, CorpusError, Dataset,
    EnglishSplitCounts,
};
use crate::embeddings::{load_embeddings, EmbeddingError, EmbeddingTable};
use crate::evaluation::{compare, evaluate_labels, EvalError, EvalReport, ReportMeta};
use crate::models::{
    build_bilstm_cnn, build_cnn, build_transformer_classifier, train, Architecture, BiLstmConfig, CnnConfig,
    ModelError, TrainedModel, TrainingHyperparams, TransformerConfig,
};
use crate::sampling::{resample, subsample, target_counts, SamplingError, SamplingSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// 2 for problems with the configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Validation(_) | ExperimentError::Sampling(SamplingError::Parse(_)) => 2,
            _ => 1,
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Crosslingual,
    Bootstrap,
    ImbalanceSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    De,
}

impl Language {
    fn prefix(self) -> &'static str {
        match self {
            Language::En => "EN",
            Language::De => "DE",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub stormfront_files: Option<PathBuf>,
    pub stormfront_metadata: Option<PathBuf>,
    pub germeval_train: Option<PathBuf>,
    pub germeval_test: Option<PathBuf>,
    pub forum_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub en: Option<PathBuf>,
    pub de: Option<PathBuf>,
    pub max_vocab: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Spec applied to EN-TRAIN for the cross-lingual stage.
    pub train: String,
    /// Specs of an imbalance sweep.
    pub sweep: Vec<String>,
    pub sweep_language: Language,
    /// Desk-scale cap on training examples per architecture, applied after
    /// sampling by a stratified subsample.
    pub max_train_examples: BTreeMap<Architecture, usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            train: "ratio=1:1 mode=oversample".into(),
            sweep: vec![
                "ratio=7:1 mode=oversample".into(),
                "ratio=2:1 mode=undersample".into(),
                "ratio=1:1 mode=undersample".into(),
                "ratio=1:1 mode=oversample".into(),
            ],
            sweep_language: Language::De,
            max_train_examples: BTreeMap::new(),
        }
    }
}

/// One set of hyperparameters per architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchHyperparams {
    pub cnn: TrainingHyperparams,
    pub bilstm: TrainingHyperparams,
    pub transformer: TrainingHyperparams,
}

fn hp(w: (f64, f64), dropout: f64, learning_rate: f64, batch_size: usize, epochs: usize) -> TrainingHyperparams {
    TrainingHyperparams {
        class_weight_no_hate: w.0,
        class_weight_hate: w.1,
        dropout,
        learning_rate,
        batch_size,
        epochs,
        seed: 0,
    }
}

impl ArchHyperparams {
    /// Optimal settings for training on EN-OS[1:1].
    pub fn english_training() -> Self {
        ArchHyperparams {
            cnn: hp((0.6, 0.4), 0.7, 1e-4, 50, 1),
            bilstm: hp((0.5, 0.5), 0.2, 3e-3, 40, 30),
            transformer: hp((1.0, 1.0), 0.2, 1e-5, 5, 10),
        }
    }

    /// Optimal settings for fine-tuning on the relabelled German training set.
    pub fn relabelled_fine_tuning() -> Self {
        ArchHyperparams {
            cnn: hp((0.01, 0.99), 0.2, 1e-6, 30, 1),
            bilstm: hp((0.1, 0.9), 0.7, 1e-6, 50, 2),
            transformer: hp((1.0, 1.0), 0.5, 1e-5, 10, 10),
        }
    }

    /// Optimal settings for fine-tuning on the cleaned forum crawl.
    pub fn forum_fine_tuning() -> Self {
        ArchHyperparams {
            cnn: hp((0.01, 0.99), 0.9, 1e-4, 2, 1),
            bilstm: hp((0.1, 0.9), 0.9, 1e-7, 20, 1),
            transformer: hp((1.0, 1.0), 0.6, 1e-7, 1, 5),
        }
    }

    pub fn get(&self, a: Architecture) -> &TrainingHyperparams {
        match a {
            Architecture::Cnn => &self.cnn,
            Architecture::Bilstm => &self.bilstm,
            Architecture::Transformer => &self.transformer,
        }
    }

    fn get_mut(&mut self, a: Architecture) -> &mut TrainingHyperparams {
        match a {
            Architecture::Cnn => &mut self.cnn,
            Architecture::Bilstm => &mut self.bilstm,
            Architecture::Transformer => &mut self.transformer,
        }
    }

    pub fn as_map(&self) -> BTreeMap<Architecture, TrainingHyperparams> {
        Architecture::ALL.iter().map(|&a| (a, self.get(a).clone())).collect()
    }
}

fn default_train_hp() -> ArchHyperparams {
    ArchHyperparams::english_training()
}

fn default_finetune_hp() -> ArchHyperparams {
    ArchHyperparams::relabelled_fine_tuning()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// `de_train`, `forum`, or a path to a canonical TSV.
    pub unlabeled: String,
    /// Trained ensemble to start from; defaults to the cross-lingual
    /// stage's models.
    pub ensemble_dir: Option<PathBuf>,
    pub rounds: usize,
    /// Fine-tuning learning rates to choose from per architecture by DE-DEV
    /// macro-F1; empty keeps the configured rates. Single round only.
    pub lr_grid: Vec<f64>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            unlabeled: "de_train".into(),
            ensemble_dir: None,
            rounds: 1,
            lr_grid: Vec::new(),
        }
    }
}

fn all_architectures() -> Vec<Architecture> {
    Architecture::ALL.to_vec()
}

fn default_max_len() -> usize {
    crate::embeddings::DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: PathBuf,
    #[serde(default = "all_architectures")]
    pub architectures: Vec<Architecture>,
    pub data: DataConfig,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub cnn: CnnConfig,
    #[serde(default)]
    pub bilstm: BiLstmConfig,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default = "default_train_hp")]
    pub train: ArchHyperparams,
    #[serde(default = "default_finetune_hp")]
    pub finetune: ArchHyperparams,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    /// Split English examples the fixed split counts leave over; English
    /// noHate has one more than the published splits use.
    #[serde(default)]
    pub english_split: Option<EnglishSplitCounts>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl ExperimentConfig {
    /// Parse a config. `[train]` and `[finetune]` entries override a preset
    /// field by field; `preset = "english" | "relabelled" | "forum"` picks
    /// the base (default: english for `train`, relabelled for `finetune`).
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        for (key, default) in [("train", "english"), ("finetune", "relabelled")] {
            let user = match doc.remove(key) {
                Some(toml::Value::Table(t)) => t,
                Some(_) => return Err(invalid(format!("{key} must be a table"))),
                None => toml::Table::new(),
            };
            doc.insert(key.into(), toml::Value::Table(merge_preset(user, default)?));
        }
        doc.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))
    }

    /// Read a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.stormfront_files,
            &mut d.stormfront_metadata,
            &mut d.germeval_train,
            &mut d.germeval_test,
            &mut d.forum_dump,
            &mut self.embeddings.en,
            &mut self.embeddings.de,
            &mut self.bootstrap.ensemble_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if !self.out_dir.as_os_str().is_empty() {
            fix(&mut self.out_dir);
        }
        if let Some(r) = &mut self.transformer.registry_dir {
            fix(r);
        }
        let id = PathBuf::from(&self.transformer.model_identifier);
        if id.is_relative() && base.join(&id).is_dir() {
            self.transformer.model_identifier = base.join(id).display().to_string();
        }
        if !["de_train", "forum"].contains(&self.bootstrap.unlabeled.as_str()) {
            let mut p = PathBuf::from(&self.bootstrap.unlabeled);
            fix(&mut p);
            self.bootstrap.unlabeled = p.display().to_string();
        }
    }

    /// Make the global seed authoritative: every component seed is derived
    /// from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.cnn.seed = seed;
        self.bilstm.seed = seed.wrapping_add(1);
        self.transformer.seed = seed.wrapping_add(2);
        for (k, a) in Architecture::ALL.into_iter().enumerate() {
            self.train.get_mut(a).seed = seed.wrapping_add(10 + k as u64);
            self.finetune.get_mut(a).seed = seed.wrapping_add(20 + k as u64);
        }
        self.cnn.max_len = self.max_len;
        self.bilstm.max_len = self.max_len;
    }

    /// Check everything that can be checked before running.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("out_dir is not set"));
        }
        if self.architectures.is_empty() {
            return Err(invalid("no architectures selected"));
        }
        let need = |p: &Option<PathBuf>, what: &str| -> Result<(), ExperimentError> {
            match p {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(invalid(format!("{what} {} does not exist", p.display()))),
                None => Err(invalid(format!("{what} is not configured"))),
            }
        };
        let d = &self.data;
        need(&d.germeval_train, "data.germeval_train")?;
        need(&d.germeval_test, "data.germeval_test")?;
        let english = self.stage == Stage::Crosslingual
            || (self.stage == Stage::Bootstrap && self.bootstrap.ensemble_dir.is_none())
            || (self.stage == Stage::ImbalanceSweep && self.sampling.sweep_language == Language::En);
        if english {
            need(&d.stormfront_files, "data.stormfront_files")?;
            need(&d.stormfront_metadata, "data.stormfront_metadata")?;
        }
        let vectors = self.architectures.iter().any(|a| *a != Architecture::Transformer);
        if vectors {
            need(&self.embeddings.de, "embeddings.de")?;
            if english {
                need(&self.embeddings.en, "embeddings.en")?;
            }
        }
        self.train_spec()?;
        for s in &self.sampling.sweep {
            s.parse::<SamplingSpec>()?;
        }
        for a in Architecture::ALL {
            self.train.get(a).validate()?;
            self.finetune.get(a).validate()?;
        }
        self.cnn.validate()?;
        self.bilstm.validate()?;
        if self.stage == Stage::Bootstrap {
            match self.bootstrap.unlabeled.as_str() {
                "de_train" => {}
                "forum" => need(&d.forum_dump, "data.forum_dump")?,
                other => need(&Some(PathBuf::from(other)), "bootstrap.unlabeled")?,
            }
            if let Some(dir) = &self.bootstrap.ensemble_dir {
                need(&Some(dir.clone()), "bootstrap.ensemble_dir")?;
            }
            if self.bootstrap.rounds == 0 {
                return Err(invalid("bootstrap.rounds must be at least 1"));
            }
            if !self.bootstrap.lr_grid.is_empty() && self.bootstrap.rounds != 1 {
                return Err(invalid("bootstrap.lr_grid needs rounds = 1"));
            }
            if self.bootstrap.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
                return Err(invalid("bootstrap.lr_grid entries must be positive"));
            }
        }
        if self.architectures.contains(&Architecture::Transformer) && self.stage != Stage::Bootstrap {
            crate::models::transformer::resolve_checkpoint(&self.transformer)?;
        }
        Ok(())
    }

    fn train_spec(&self) -> Result<SamplingSpec, ExperimentError> {
        let mut spec: SamplingSpec = self.sampling.train.parse()?;
        if !self.sampling.train.contains("seed=") {
            spec.seed = self.seed;
        }
        Ok(spec)
    }

    fn sweep_specs(&self) -> Result<Vec<SamplingSpec>, ExperimentError> {
        self.sampling
            .sweep
            .iter()
            .map(|s| {
                let mut spec: SamplingSpec = s.parse()?;
                if !s.contains("seed=") {
                    spec.seed = self.seed;
                }
                Ok(spec)
            })
            .collect()
    }

    /// Hash of the whole configuration except the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

fn merge_preset(mut user: toml::Table, default: &str) -> Result<toml::Table, ExperimentError> {
    let preset = match user.remove("preset") {
        None => default.to_string(),
        Some(toml::Value::String(s)) => s,
        Some(v) => return Err(invalid(format!("preset must be a string, got {v}"))),
    };
    let base = match preset.as_str() {
        "english" => ArchHyperparams::english_training(),
        "relabelled" => ArchHyperparams::relabelled_fine_tuning(),
        "forum" => ArchHyperparams::forum_fine_tuning(),
        other => return Err(invalid(format!("unknown preset {other:?}"))),
    };
    let mut merged = toml::Table::try_from(&base).expect("preset serializes");
    for (arch, fields) in user {
        let Some(toml::Value::Table(slot)) = merged.get_mut(&arch) else {
            return Err(invalid(format!("unknown architecture {arch:?}")));
        };
        let toml::Value::Table(fields) = fields else {
            return Err(invalid(format!("{arch} must be a table")));
        };
        slot.extend(fields);
    }
    Ok(merged)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a file, or of every file below a directory in name order.
fn hash_path(path: &Path) -> Result<String, ExperimentError> {
    if path.is_file() {
        return hash_file(path);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io(path, err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    let mut h = Sha256::new();
    for p in entries {
        h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.update(hash_path(&p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn write_file(path: &Path, content: &str) -> Result<(), ExperimentError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| io(p, e))?;
    }
    fs::write(path, content).map_err(|e| io(path, e))
}

/// Run metadata written next to datasets and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
    pub artifact: String,
    pub content_sha256: String,
    pub counts: Option<ClassCounts>,
    pub detail: Option<String>,
}

/// Configuration plus the run identity shared by all stages.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let hash = cfg.config_hash();
        Ok(Run { cfg, hash })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn meta(&self, model: &str, dataset: &str, stage: &str) -> ReportMeta {
        ReportMeta {
            config_hash: Some(self.hash.clone()),
            seed: Some(self.cfg.seed),
            ..ReportMeta::new(model, dataset, stage)
        }
    }

    /// Write a dataset as TSV with a `.meta.json` sidecar.
    fn save_dataset(&self, ds: &Dataset, path: &Path, detail: Option<String>) -> Result<(), ExperimentError> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| io(p, e))?;
        }
        write_tsv(ds, path)?;
        let meta = ArtifactMeta {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            artifact: ds.name.clone(),
            content_sha256: hash_file(path)?,
            counts: ds.examples.iter().all(|e| e.label.is_some()).then(|| ds.class_counts()),
            detail,
        };
        write_file(
            &path.with_extension("meta.json"),
            &serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
    }

    fn save_report(&self, report: &EvalReport, rel: &str) -> Result<(), ExperimentError> {
        write_file(&self.out(rel), &report.to_json())
    }
}

/// Output of the relabel-and-split stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub en: Option<EnglishData>,
    pub de_train: Dataset,
    pub de_dev: Dataset,
    pub de_test: Dataset,
    pub de_new: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnglishData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub unassigned: Dataset,
}

/// Relabel and split the German shared-task files.
pub fn prepare_german(train: &Path, test: &Path) -> Result<(Dataset, Dataset, Dataset), ExperimentError> {
    let official = relabel_germeval(&read_germeval(train, "germeval-train")?, "de_official_train")?;
    let (de_train, de_dev) = split_german(&official)?;
    let de_test = relabel_germeval(&read_germeval(test, "germeval-test")?, "de_test")?;
    Ok((de_train, de_dev, de_test))
}

/// Relabel and split the English corpus.
pub fn prepare_english(
    files: &Path,
    metadata: &Path,
    counts: &EnglishSplitCounts,
    seed: u64,
) -> Result<EnglishData, ExperimentError> {
    let full = relabel_stormfront(&read_stormfront(files, metadata)?)?;
    let s = split_english(&full, counts, seed)?;
    Ok(EnglishData {
        train: s.train,
        dev: s.dev,
        test: s.test,
        unassigned: s.unassigned,
    })
}

/// Relabel, split and clean every configured source; writes
/// `prepared/*.tsv`.
pub fn prepare(run: &Run) -> Result<Prepared, ExperimentError> {
    let cfg = &run.cfg;
    let d = &cfg.data;
    let (de_train, de_dev, de_test) = prepare_german(
        d.germeval_train.as_deref().expect("validated"),
        d.germeval_test.as_deref().expect("validated"),
    )?;
    let en = match (&d.stormfront_files, &d.stormfront_metadata) {
        (Some(f), Some(m)) => Some(prepare_english(
            f,
            m,
            &cfg.english_split.unwrap_or_default(),
            cfg.seed,
        )?),
        _ => None,
    };
    let de_new = match &d.forum_dump {
        Some(p) => Some(preprocess_forum_text(&read_forum_dump(p)?)),
        None => None,
    };
    let dir = run.out("prepared");
    if let Some(en) = &en {
        for (ds, name) in [
            (&en.train, "en_train"),
            (&en.dev, "en_dev"),
            (&en.test, "en_test"),
            (&en.unassigned, "en_unassigned"),
        ] {
            run.save_dataset(ds, &dir.join(format!("{name}.tsv")), None)?;
        }
    }
    for (ds, name) in [(&de_train, "de_train"), (&de_dev, "de_dev"), (&de_test, "de_test")] {
        run.save_dataset(ds, &dir.join(format!("{name}.tsv")), None)?;
    }
    if let Some(ds) = &de_new {
        run.save_dataset(ds, &dir.join("de_new.tsv"), None)?;
    }
    Ok(Prepared {
        en,
        de_train,
        de_dev,
        de_test,
        de_new,
    })
}

/// Training set of the cross-lingual stage: EN-TRAIN resampled per
/// `sampling.train`. Written to `sampled/`.
pub fn sample_english(run: &Run, prepared: &Prepared) -> Result<Dataset, ExperimentError> {
    let en = prepared
        .en
        .as_ref()
        .ok_or_else(|| invalid("the English corpus is not configured"))?;
    let spec = run.cfg.train_spec()?;
    sample_with(run, &en.train, &spec, Language::En)
}

fn sample_with(run: &Run, base: &Dataset, spec: &SamplingSpec, lang: Language) -> Result<Dataset, ExperimentError> {
    let expected = target_counts(base.class_counts(), spec, &base.name)?;
    let name = spec.dataset_name(lang.prefix());
    let sampled = resample(base, spec)?.renamed(name.clone());
    if sampled.class_counts() != expected {
        return Err(invalid(format!(
            "{name} has {} instead of {expected}",
            sampled.class_counts()
        )));
    }
    let path = run.out(&format!("sampled/{name}.tsv"));
    run.save_dataset(&sampled, &path, Some(spec.to_string()))?;
    Ok(sampled)
}

/// The sweep language's training set under every configured sweep spec,
/// each written to `sampled/` after its counts are re-asserted.
pub fn sample_sweep(run: &Run, prepared: &Prepared) -> Result<Vec<(SamplingSpec, Dataset)>, ExperimentError> {
    let lang = run.cfg.sampling.sweep_language;
    let base = match lang {
        Language::De => &prepared.de_train,
        Language::En => {
            &prepared
                .en
                .as_ref()
                .ok_or_else(|| invalid("the English corpus is not configured"))?
                .train
        }
    };
    run.cfg
        .sweep_specs()?
        .into_iter()
        .map(|spec| Ok((spec.clone(), sample_with(run, base, &spec, lang)?)))
        .collect()
}

/// `data` reduced to the architecture's configured cap, if any.
pub fn cap_for(run: &Run, arch: Architecture, data: &Dataset, seed: u64) -> Result<Dataset, ExperimentError> {
    match run.cfg.sampling.max_train_examples.get(&arch) {
        Some(&max) if data.len() > max => {
            let name = format!("{}-sub{max}", data.name);
            let c = subsample(data, max, seed)?.renamed(name.clone());
            run.save_dataset(&c, &run.out(&format!("sampled/{name}.tsv")), Some(format!("max={max} seed={seed}")))?;
            Ok(c)
        }
        _ => Ok(data.clone()),
    }
}

/// Word vector tables of both languages, loaded once.
#[derive(Default)]
pub struct Vectors {
    pub en: Option<EmbeddingTable>,
    pub de: Option<EmbeddingTable>,
}

impl Vectors {
    pub fn load(cfg: &ExperimentConfig, need_en: bool) -> Result<Self, ExperimentError> {
        if cfg.architectures.iter().all(|a| *a == Architecture::Transformer) {
            return Ok(Vectors::default());
        }
        let e = &cfg.embeddings;
        let load = |p: &Option<PathBuf>| -> Result<Option<EmbeddingTable>, ExperimentError> {
            p.as_ref().map(|p| load_embeddings(p, e.max_vocab)).transpose().map_err(Into::into)
        };
        let v = Vectors {
            en: if need_en { load(&e.en)? } else { None },
            de: load(&e.de)?,
        };
        if let (Some(en), Some(de)) = (&v.en, &v.de) {
            en.ensure_same_dimension(de)?;
        }
        Ok(v)
    }

    fn get(&self, lang: Language) -> Result<&EmbeddingTable, ExperimentError> {
        match lang {
            Language::En => self.en.as_ref(),
            Language::De => self.de.as_ref(),
        }
        .ok_or_else(|| invalid(format!("no {lang:?} embeddings loaded")))
    }
}

/// Untrained model whose vector models read `train_lang` while training and
/// `predict_lang` at prediction time.
pub fn build_model(
    cfg: &ExperimentConfig,
    arch: Architecture,
    vectors: &Vectors,
    train_lang: Language,
    predict_lang: Language,
) -> Result<TrainedModel, ExperimentError> {
    let mut model = match arch {
        Architecture::Cnn => build_cnn(&cfg.cnn, vectors.get(train_lang)?)?,
        Architecture::Bilstm => build_bilstm_cnn(&cfg.bilstm, vectors.get(train_lang)?)?,
        Architecture::Transformer => return Ok(build_transformer_classifier(&cfg.transformer)?),
    };
    if predict_lang != train_lang {
        model.set_inference_embeddings(vectors.get(predict_lang)?.clone())?;
    }
    Ok(model)
}

fn dataset_digest(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    crate::corpus::write_tsv_to(ds, &mut buf).expect("in-memory write");
    sha256_hex(&buf)
}

/// Train `arch`, or load the cached checkpoint trained from identical
/// inputs. Returns the model and its checkpoint directory.
#[allow(clippy::too_many_arguments)]
pub fn train_cached(
    run: &Run,
    arch: Architecture,
    vectors: &Vectors,
    data: &Dataset,
    dev: &Dataset,
    hp: &TrainingHyperparams,
    langs: (Language, Language),
    label: &str,
) -> Result<(TrainedModel, PathBuf), ExperimentError> {
    let cfg = &run.cfg;
    let mut key = Sha256::new();
    key.update(arch.as_str());
    key.update(serde_json::to_string(&(hp, &langs)).expect("serializes"));
    key.update(match arch {
        Architecture::Cnn => serde_json::to_string(&cfg.cnn),
        Architecture::Bilstm => serde_json::to_string(&cfg.bilstm),
        Architecture::Transformer => serde_json::to_string(&cfg.transformer),
    }
    .expect("serializes"));
    key.update(dataset_digest(data));
    key.update(dataset_digest(dev));
    match arch {
        Architecture::Transformer => {
            key.update(hash_path(&crate::models::transformer::resolve_checkpoint(&cfg.transformer)?)?)
        }
        _ => {
            for lang in [langs.0, langs.1] {
                let t = vectors.get(lang)?;
                key.update(sha256_hex(&serde_json::to_vec(&t.matrix().data).expect("serializes")));
                key.update(t.tokens().collect::<Vec<_>>().join("\n"));
            }
        }
    }
    let key = hex::encode(key.finalize());
    let dir = run.out(&format!("cache/{}", &key[..24]));
    let done = dir.join(".done");
    let model = if done.exists() {
        log::info!("{label}: reusing cached {arch} checkpoint {}", dir.display());
        TrainedModel::load(&dir)?
    } else {
        log::info!("{label}: training {arch} on {} ({} examples)", data.name, data.len());
        let start = build_model(cfg, arch, vectors, langs.0, langs.1)?;
        let model = train(&start, data, hp, dev)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        model.save(&dir)?;
        write_file(&done, &key)?;
        model
    };
    write_file(
        &dir.join("run.json"),
        &serde_json::to_string_pretty(&ArtifactMeta {
            config_hash: run.hash.clone(),
            seed: cfg.seed,
            artifact: format!("{label}/{arch}"),
            content_sha256: key,
            counts: Some(data.class_counts()),
            detail: Some(data.name.clone()),
        })
        .expect("meta serializes"),
    )?;
    Ok((model, dir))
}

pub fn evaluate_model(
    model: &TrainedModel,
    data: &Dataset,
    meta: ReportMeta,
) -> Result<EvalReport, ExperimentError> {
    let gold = data
        .iter()
        .map(|e| e.label.ok_or_else(|| ModelError::Unlabeled { id: e.id.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let pred = model.predict_labels(data)?;
    Ok(evaluate_labels(&gold, &pred, meta)?)
}

fn comparison_files(run: &Run, reports: &[EvalReport], rel: &str) -> Result<(), ExperimentError> {
    if reports.is_empty() {
        return Ok(());
    }
    let c = compare(reports, 0)?;
    write_file(&run.out(&format!("{rel}.txt")), &c.to_text())?;
    write_file(&run.out(&format!("{rel}.csv")), &c.to_csv())
}

#[derive(Debug, Clone)]
pub struct CrosslingualResult {
    pub models: Vec<(Architecture, TrainedModel, PathBuf)>,
    pub reports: Vec<EvalReport>,
}

/// Train every configured architecture on English and test on DE-TEST.
pub fn run_crosslingual(run: &Run) -> Result<CrosslingualResult, ExperimentError> {
    let prepared = prepare(run)?;
    let data = sample_english(run, &prepared)?;
    let vectors = Vectors::load(&run.cfg, true)?;
    let mut out = CrosslingualResult {
        models: Vec::new(),
        reports: Vec::new(),
    };
    let seed = run.cfg.train_spec()?.seed;
    for &arch in &run.cfg.architectures {
        let capped = cap_for(run, arch, &data, seed)?;
        let (model, dir) = train_cached(
            run,
            arch,
            &vectors,
            &capped,
            &prepared.de_dev,
            run.cfg.train.get(arch),
            (Language::En, Language::De),
            "crosslingual",
        )?;
        let report = evaluate_model(&model, &prepared.de_test, run.meta(arch.as_str(), "DE-TEST", "crosslingual"))?;
        run.save_report(&report, &format!("reports/crosslingual/{arch}.json"))?;
        out.models.push((arch, model, dir));
        out.reports.push(report);
    }
    comparison_files(run, &out.reports, "reports/crosslingual/comparison")?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub before: Vec<EvalReport>,
    pub after: Vec<EvalReport>,
    pub labelled: Vec<bootstrap::BootstrappedDataset>,
    pub audit: Option<bootstrap::Audit>,
    pub ensemble: Ensemble,
    pub lr_selection: Vec<LrSelection>,
}

/// Relabel the unlabelled German set with the ensemble, fine-tune every
/// member and compare DE-TEST scores before and after.
pub fn run_bootstrap(run: &Run) -> Result<BootstrapResult, ExperimentError> {
    let cfg = &run.cfg;
    let ensemble = match &cfg.bootstrap.ensemble_dir {
        Some(dir) => Ensemble::load(dir)?,
        None => {
            let cross = run_crosslingual(run)?;
            Ensemble::new(cross.models.into_iter().map(|(_, m, _)| m).collect())?
        }
    };
    let prepared = prepare(run)?;
    let (unlabeled, gold) = match cfg.bootstrap.unlabeled.as_str() {
        "de_train" => (prepared.de_train.clone(), Some(prepared.de_train.clone())),
        "forum" => (prepared.de_new.clone().expect("validated"), None),
        path => {
            let ds = read_tsv(Path::new(path))?;
            let gold = ds.examples.iter().all(|e| e.label.is_some()) && !ds.is_empty();
            (ds.clone(), gold.then_some(ds))
        }
    };
    let stage = format!("bootstrap_{}", cfg.bootstrap.unlabeled.replace(['/', '\\', '.'], "_"));
    let stage = if stage.len() > 40 { "bootstrap_file".to_string() } else { stage };

    let mut before = Vec::new();
    for m in ensemble.members() {
        let r = evaluate_model(m, &prepared.de_test, run.meta(m.architecture().as_str(), "DE-TEST", "before"))?;
        before.push(r);
    }
    let dir = run.out(&stage);
    let mut lr_selection = Vec::new();
    let (after_ens, labelled) = if cfg.bootstrap.lr_grid.is_empty() {
        bootstrap_rounds(&ensemble, &unlabeled, &cfg.finetune.as_map(), cfg.bootstrap.rounds)?
    } else {
        let boot = bootstrap::ensemble_label(&ensemble, &unlabeled);
        let (members, picks) = select_learning_rates(run, &ensemble, &boot.dataset, &prepared.de_dev)?;
        write_file(&dir.join("lr_selection.json"), &serde_json::to_string_pretty(&picks).expect("serializes"))?;
        lr_selection = picks;
        (Ensemble::new(members)?, vec![boot])
    };
    for (i, b) in labelled.iter().enumerate() {
        let tsv = dir.join(format!("round{}.tsv", i + 1));
        b.save(&tsv, &dir.join(format!("round{}.votes.tsv", i + 1)))?;
        run.save_dataset(&b.dataset, &tsv, Some(format!("ensemble of {:?}", b.members)))?;
    }
    let audit = match (&gold, labelled.first()) {
        (Some(g), Some(b)) => {
            let a = audit_against_gold(b, g)?;
            write_file(&dir.join("audit.txt"), &a.to_text())?;
            write_file(&dir.join("audit.json"), &serde_json::to_string_pretty(&a).expect("serializes"))?;
            Some(a)
        }
        _ => None,
    };
    after_ens.save(&dir.join("ensemble"))?;
    let mut after = Vec::new();
    for (m, b) in after_ens.members().iter().zip(&before) {
        let r = evaluate_model(m, &prepared.de_test, run.meta(m.architecture().as_str(), "DE-TEST", "after"))?;
        run.save_report(b, &format!("reports/{stage}/{}_before.json", b.meta.model))?;
        run.save_report(&r, &format!("reports/{stage}/{}_after.json", r.meta.model))?;
        after.push(r);
    }
    // each member against its own pre-fine-tuning row
    let mut text = String::new();
    let mut csv = String::new();
    for (b, a) in before.iter().zip(&after) {
        let c = compare(&[b.clone(), a.clone()], 0)?;
        let _ = writeln!(text, "{}", c.to_text());
        csv.push_str(&c.to_csv());
    }
    write_file(&run.out(&format!("reports/{stage}/comparison.txt")), &text)?;
    write_file(&run.out(&format!("reports/{stage}/comparison.csv")), &csv)?;
    Ok(BootstrapResult {
        before,
        after,
        labelled,
        audit,
        ensemble: after_ens,
        lr_selection,
    })
}

/// Learning rate picked for one member, with the DE-DEV macro-F1 of every
/// grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSelection {
    pub architecture: Architecture,
    pub chosen: f64,
    pub dev_macro_f1: Vec<(f64, f64)>,
}

/// Fine-tune every member at each grid rate and keep, per member, the one
/// scoring best on DE-DEV; ties go to the earlier grid entry.
fn select_learning_rates(
    run: &Run,
    ensemble: &Ensemble,
    data: &Dataset,
    dev: &Dataset,
) -> Result<(Vec<TrainedModel>, Vec<LrSelection>), ExperimentError> {
    let mut members = Vec::new();
    let mut picks = Vec::new();
    for m in ensemble.members() {
        let arch = m.architecture();
        let mut best: Option<(f64, f64, TrainedModel)> = None;
        let mut scores = Vec::new();
        for &lr in &run.cfg.bootstrap.lr_grid {
            let hp = TrainingHyperparams {
                learning_rate: lr,
                ..run.cfg.finetune.get(arch).clone()
            };
            let tuned = if data.is_empty() { m.clone() } else { bootstrap::fine_tune_member(m, data, &hp)? };
            let f1 = evaluate_model(&tuned, dev, ReportMeta::new(arch.as_str(), "DE-DEV", "lr_grid"))?.macro_avg.f1;
            log::info!("{arch}: lr {lr:e} gives DE-DEV macro-F1 {f1:.2}");
            scores.push((lr, f1));
            if best.as_ref().is_none_or(|b| f1 > b.1) {
                best = Some((lr, f1, tuned));
            }
        }
        let (chosen, _, model) = best.expect("grid is non-empty");
        picks.push(LrSelection {
            architecture: arch,
            chosen,
            dev_macro_f1: scores,
        });
        members.push(model);
    }
    Ok((members, picks))
}

/// Train and test every architecture on every sampled variant of one
/// language's training set.
pub fn run_imbalance_sweep(run: &Run) -> Result<Vec<EvalReport>, ExperimentError> {
    let cfg = &run.cfg;
    let prepared = prepare(run)?;
    let lang = cfg.sampling.sweep_language;
    let (dev, test) = match lang {
        Language::De => (&prepared.de_dev, &prepared.de_test),
        Language::En => {
            let en = prepared.en.as_ref().ok_or_else(|| invalid("the English corpus is not configured"))?;
            (&en.dev, &en.test)
        }
    };
    let vectors = Vectors::load(cfg, lang == Language::En)?;
    let mut reports = Vec::new();
    for (spec, data) in sample_sweep(run, &prepared)? {
        let name = spec.dataset_name(lang.prefix());
        for &arch in &cfg.architectures {
            let capped = cap_for(run, arch, &data, spec.seed)?;
            let (model, _) = train_cached(run, arch, &vectors, &capped, dev, cfg.train.get(arch), (lang, lang), "sweep")?;
            let test_name = format!("{}-TEST", lang.prefix());
            let report = evaluate_model(&model, test, run.meta(arch.as_str(), &test_name, &name))?;
            let file = name.replace(['[', ']'], "_").replace(':', "-");
            run.save_report(&report, &format!("reports/sweep/{arch}_{file}.json"))?;
            reports.push(report);
        }
    }
    comparison_files(run, &reports, "reports/sweep/comparison")?;
    Ok(reports)
}

/// Evaluate checkpoints on DE-TEST.
pub fn run_evaluate(run: &Run, model_dirs: &[PathBuf]) -> Result<Vec<EvalReport>, ExperimentError> {
    let prepared = prepare(run)?;
    let mut reports = Vec::new();
    for dir in model_dirs {
        let model = TrainedModel::load(dir)?;
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        let r = evaluate_model(&model, &prepared.de_test, run.meta(model.architecture().as_str(), "DE-TEST", &name))?;
        run.save_report(&r, &format!("reports/evaluate/{name}.json"))?;
        reports.push(r);
    }
    comparison_files(run, &reports, "reports/evaluate/comparison")?;
    Ok(reports)
}

/// Collect every report JSON below `dir` (sorted by path) into one
/// comparison, the first being the baseline.
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>, ExperimentError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        if let Ok(r) = EvalReport::from_json(&text) {
            reports.push(r);
        }
    }
    Ok(reports)
}

/// Desk-scale config for one stage over a synthetic fixture tree at
/// `world/` next to the config file. Reduced network sizes keep a full run
/// within minutes on one CPU core.
pub fn desk_config(stage: Stage, seed: u64) -> String {
    let name = match stage {
        Stage::Crosslingual => "crosslingual",
        Stage::Bootstrap => "bootstrap",
        Stage::ImbalanceSweep => "imbalance_sweep",
    };
    format!(
        r#"stage = "{name}"
seed = {seed}
out_dir = "runs/{name}"
max_len = 24

[data]
stormfront_files = "world/stormfront/all_files"
stormfront_metadata = "world/stormfront/annotations_metadata.csv"
germeval_train = "world/germeval/germeval2018.training.txt"
germeval_test = "world/germeval/germeval2018.test.txt"
forum_dump = "world/forum/thread.jsonl"

[embeddings]
en = "world/vectors/wiki.multi.en.vec"
de = "world/vectors/wiki.multi.de.vec"

[sampling.max_train_examples]
transformer = 2000

[bilstm]
recurrent_units = 16
conv_feature_maps = 16
dense_units = 16

[transformer]
model_identifier = "bert-base-multilingual-cased"
registry_dir = "world/encoders"
max_subword_len = 32

[train.bilstm]
epochs = 10

[bootstrap]
unlabeled = "de_train"
lr_grid = [1e-6, 1e-5, 1e-4, 1e-3]
"#
    )
}
