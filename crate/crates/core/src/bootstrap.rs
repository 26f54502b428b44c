//! Majority-vote labelling of unlabelled target-language text and the
//! fine-tuning round built on it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_tsv, write_tsv, CorpusError, Dataset, Example, Label};
use crate::evaluation::ConfusionMatrix;
use crate::models::{fine_tune, Architecture, ModelError, TrainedModel, TrainingHyperparams};

pub const MEMBERS: usize = 3;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("an ensemble needs exactly {MEMBERS} members, got {0}")]
    MemberCount(usize),
    #[error("no fine-tuning hyperparameters for {0}")]
    MissingHyperparams(Architecture),
    #[error("ids without a gold label: {}", .0.join(", "))]
    IdMismatch(Vec<String>),
    #[error("votes file {path}, line {line}: {message}")]
    Votes { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path, source: std::io::Error) -> BootstrapError {
    BootstrapError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Three voters; with two classes a strict majority always exists.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<TrainedModel>,
}

impl Ensemble {
    pub fn new(members: Vec<TrainedModel>) -> Result<Self, BootstrapError> {
        if members.len() != MEMBERS {
            return Err(BootstrapError::MemberCount(members.len()));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[TrainedModel] {
        &self.members
    }

    pub fn into_members(self) -> Vec<TrainedModel> {
        self.members
    }

    pub fn architectures(&self) -> Vec<Architecture> {
        self.members.iter().map(TrainedModel::architecture).collect()
    }

    /// One checkpoint directory per member: `member0`, `member1`, `member2`.
    pub fn save(&self, dir: &Path) -> Result<(), BootstrapError> {
        for (i, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member{i}")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BootstrapError> {
        let members = (0..MEMBERS)
            .map(|i| TrainedModel::load(&dir.join(format!("member{i}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ensemble::new(members)
    }
}

/// The label with at least two of the three votes.
pub fn majority(votes: [Label; MEMBERS]) -> Label {
    let hate = votes.iter().filter(|v| **v == Label::Hate).count();
    if 2 * hate > MEMBERS {
        Label::Hate
    } else {
        Label::NoHate
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub id: String,
    pub votes: [Label; MEMBERS],
    pub label: Label,
}

/// An example some member could not classify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedExample {
    pub id: String,
    pub member: usize,
    pub reason: String,
}

/// Ensemble-labelled data. Gold labels of the input, when it had any, ride
/// along separately and never reach the labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrappedDataset {
    pub dataset: Dataset,
    pub votes: Vec<VoteRecord>,
    pub dropped: Vec<DroppedExample>,
    pub members: Vec<Architecture>,
    gold: HashMap<String, Label>,
}

impl BootstrappedDataset {
    /// Gold label of an input example, if the input carried one.
    pub fn shadow_gold(&self, id: &str) -> Option<Label> {
        self.gold.get(id).copied()
    }

    pub fn has_gold(&self) -> bool {
        !self.gold.is_empty()
    }

    /// Canonical TSV plus the votes sidecar.
    pub fn save(&self, tsv: &Path, votes: &Path) -> Result<(), BootstrapError> {
        write_tsv(&self.dataset, tsv)?;
        let mut out = String::from("id\tvote1\tvote2\tvote3\tmajority\n");
        for r in &self.votes {
            let v = r.votes.map(Label::as_str);
            writeln!(out, "{}\t{}\t{}\t{}\t{}", r.id, v[0], v[1], v[2], r.label.as_str()).expect("string write");
        }
        std::fs::write(votes, out).map_err(|e| io(votes, e))
    }

    /// Read back what [`save`](Self::save) wrote. Member architectures and
    /// shadow gold labels are not part of the files.
    pub fn load(tsv: &Path, votes: &Path) -> Result<Self, BootstrapError> {
        let dataset = read_tsv(tsv)?;
        let text = std::fs::read_to_string(votes).map_err(|e| io(votes, e))?;
        let bad = |line: usize, message: String| BootstrapError::Votes {
            path: votes.display().to_string(),
            line,
            message,
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != MEMBERS + 2 {
                return Err(bad(i + 1, format!("expected {} fields", MEMBERS + 2)));
            }
            let parse = |s: &str| s.parse::<Label>().map_err(|_| bad(i + 1, format!("unknown label {s:?}")));
            let votes = [parse(f[1])?, parse(f[2])?, parse(f[3])?];
            let label = parse(f[4])?;
            if majority(votes) != label {
                return Err(bad(i + 1, "majority does not match the votes".into()));
            }
            records.push(VoteRecord {
                id: f[0].to_string(),
                votes,
                label,
            });
        }
        if records.len() != dataset.len() || records.iter().zip(dataset.iter()).any(|(r, e)| r.id != e.id) {
            return Err(bad(0, "votes and dataset ids differ".into()));
        }
        Ok(BootstrappedDataset {
            dataset,
            votes: records,
            dropped: Vec::new(),
            members: Vec::new(),
            gold: HashMap::new(),
        })
    }
}

/// Hard-label majority vote over the three members.
pub fn ensemble_label(ens: &Ensemble, unlabeled: &Dataset) -> BootstrappedDataset {
    let predictions: Vec<_> = ens.members.iter().map(|m| m.predict(unlabeled)).collect();
    let mut examples = Vec::with_capacity(unlabeled.len());
    let mut votes = Vec::with_capacity(unlabeled.len());
    let mut dropped = Vec::new();
    let mut gold = HashMap::new();
    'examples: for (i, e) in unlabeled.iter().enumerate() {
        if let Some(g) = e.label {
            gold.insert(e.id.clone(), g);
        }
        let mut v = [Label::NoHate; MEMBERS];
        for (m, preds) in predictions.iter().enumerate() {
            match &preds[i] {
                Ok(p) => v[m] = p.label,
                Err(err) => {
                    log::warn!("dropping {}: member {m} failed: {err}", e.id);
                    dropped.push(DroppedExample {
                        id: e.id.clone(),
                        member: m,
                        reason: err.to_string(),
                    });
                    continue 'examples;
                }
            }
        }
        let label = majority(v);
        examples.push(Example::new(e.id.clone(), e.text.clone(), Some(label), e.source.clone()));
        votes.push(VoteRecord {
            id: e.id.clone(),
            votes: v,
            label,
        });
    }
    let dataset = Dataset::new(format!("{}_ensemble", unlabeled.name), examples);
    let c = dataset.class_counts();
    log::info!(
        "ensemble labelled {}: {} noHate, {} Hate, {} dropped",
        unlabeled.name,
        c.no_hate,
        c.hate,
        dropped.len()
    );
    BootstrappedDataset {
        dataset,
        votes,
        dropped,
        members: ens.architectures(),
        gold,
    }
}

/// Ensemble labels checked against gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    /// Gold on rows, ensemble on columns.
    pub matrix: ConfusionMatrix,
    pub gold_examples: usize,
    pub labelled_examples: usize,
    /// Gold examples that did not reach the labelled set.
    pub unlabelled_gold: usize,
}

impl Audit {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "gold \\ ensemble   noHate   Hate").expect("string write");
        for (name, row) in ["noHate", "Hate"].iter().zip(self.matrix.counts) {
            writeln!(s, "{name:<16} {:>7} {:>6}", row[0], row[1]).expect("string write");
        }
        writeln!(
            s,
            "labelled {} of {} gold examples ({} not labelled)",
            self.labelled_examples, self.gold_examples, self.unlabelled_gold
        )
        .expect("string write");
        s
    }
}

pub fn audit_against_gold(boot: &BootstrappedDataset, gold: &Dataset) -> Result<Audit, BootstrapError> {
    let gold_labels: HashMap<&str, Label> = gold
        .iter()
        .filter_map(|e| e.label.map(|l| (e.id.as_str(), l)))
        .collect();
    let missing: Vec<String> = boot
        .dataset
        .iter()
        .filter(|e| !gold_labels.contains_key(e.id.as_str()))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(BootstrapError::IdMismatch(missing));
    }
    let mut counts = [[0u64; 2]; 2];
    for e in boot.dataset.iter() {
        let g = gold_labels[e.id.as_str()];
        let p = e.label.expect("ensemble output is labelled");
        counts[g.index()][p.index()] += 1;
    }
    Ok(Audit {
        matrix: ConfusionMatrix::from_counts(counts),
        gold_examples: gold.len(),
        labelled_examples: boot.dataset.len(),
        unlabelled_gold: gold.len() - boot.dataset.len().min(gold.len()),
    })
}

/// Fine-tune every member on the ensemble's own labelling of `unlabeled`.
/// Vector models switch to their inference-language table first, since the
/// new training text is in that language.
pub fn bootstrap_round(
    ens: &Ensemble,
    unlabeled: &Dataset,
    per_model_hp: &BTreeMap<Architecture, TrainingHyperparams>,
) -> Result<(Ensemble, BootstrappedDataset), BootstrapError> {
    for a in ens.architectures() {
        if !per_model_hp.contains_key(&a) {
            return Err(BootstrapError::MissingHyperparams(a));
        }
    }
    let boot = ensemble_label(ens, unlabeled);
    if boot.dataset.is_empty() {
        return Ok((ens.clone(), boot));
    }
    let mut members = Vec::with_capacity(MEMBERS);
    for m in &ens.members {
        members.push(fine_tune_member(m, &boot.dataset, &per_model_hp[&m.architecture()])?);
    }
    Ok((Ensemble::new(members)?, boot))
}

/// Resume training of one member on target-language data. Vector models
/// first switch to the table they predict with, so fine-tuning reads the
/// same vectors as prediction.
pub fn fine_tune_member(
    member: &TrainedModel,
    data: &Dataset,
    hp: &TrainingHyperparams,
) -> Result<TrainedModel, BootstrapError> {
    let mut start = member.clone();
    if let Some(table) = member.inference_embeddings() {
        if Some(table) != member.embeddings() {
            start.swap_embeddings(table.clone())?;
        }
    }
    Ok(fine_tune(&start, data, hp)?)
}

/// Repeated relabel-and-fine-tune rounds; `rounds = 1` is the single round
/// above. Returns the labelled set of every round.
pub fn bootstrap_rounds(
    ens: &Ensemble,
    unlabeled: &Dataset,
    per_model_hp: &BTreeMap<Architecture, TrainingHyperparams>,
    rounds: usize,
) -> Result<(Ensemble, Vec<BootstrappedDataset>), BootstrapError> {
    let mut current = ens.clone();
    let mut sets = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (next, boot) = bootstrap_round(&current, unlabeled, per_model_hp)?;
        current = next;
        sets.push(boot);
    }
    Ok((current, sets))
}
