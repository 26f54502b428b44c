//! Samples, datasets and the adapters that turn the raw source corpora into
//! the canonical binary-labelled splits.

mod forum;
mod germeval;
mod stormfront;
mod tsv;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forum::{
    preprocess_forum_text, preprocess_forum_text_with, read_forum_dump, AsciiHeuristic,
    LanguagePredicate, RawPost,
};
pub use germeval::{
    read_germeval, relabel_germeval, split_german, GermevalCoarse, GermevalFine,
    RawGermevalRecord, GERMAN_DEV_SIZE,
};
pub use stormfront::{
    read_stormfront, relabel_stormfront, split_english, EnglishSplitCounts, EnglishSplits,
    RawStormfrontRecord, StormfrontLabel,
};
pub use tsv::{escape_field, read_tsv, unescape_field, write_tsv, write_tsv_to};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {id}: unknown label {label:?}")]
    UnknownLabel { id: String, label: String },
    #[error("record {id}: fine label {fine} is inconsistent with coarse label {coarse}")]
    InconsistentLabels {
        id: String,
        coarse: String,
        fine: String,
    },
    #[error("record {id}: empty text")]
    EmptyText { id: String },
    #[error("record {id}: missing label")]
    Unlabeled { id: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("dataset {name} has {len} examples, at least {min} required")]
    TooSmall { name: String, len: usize, min: usize },
    #[error("not enough {label} examples: requested {requested}, available {available}")]
    Shortfall {
        label: Label,
        requested: usize,
        available: usize,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CorpusError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Binary class label shared by every dataset after harmonisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "noHate")]
    NoHate,
    #[serde(rename = "Hate")]
    Hate,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NoHate, Label::Hate];

    /// Class index: noHate = 0, Hate = 1.
    pub fn index(self) -> usize {
        match self {
            Label::NoHate => 0,
            Label::Hate => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::NoHate),
            1 => Some(Label::Hate),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoHate => "noHate",
            Label::Hate => "Hate",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nohate" | "0" => Ok(Label::NoHate),
            "hate" | "1" => Ok(Label::Hate),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: Option<Label>,
    pub source: String,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        label: Option<Label>,
        source: impl Into<String>,
    ) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            label,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub no_hate: usize,
    pub hate: usize,
}

impl ClassCounts {
    pub fn new(no_hate: usize, hate: usize) -> Self {
        ClassCounts { no_hate, hate }
    }

    pub fn total(&self) -> usize {
        self.no_hate + self.hate
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::NoHate => self.no_hate,
            Label::Hate => self.hate,
        }
    }

    pub fn get_mut(&mut self, label: Label) -> &mut usize {
        match label {
            Label::NoHate => &mut self.no_hate,
            Label::Hate => &mut self.hate,
        }
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.no_hate, self.hate)
    }
}

/// Ordered collection of examples.
///
/// Ids are unique in every dataset produced by the source adapters. Resampled
/// datasets may repeat an id when an example was duplicated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        Dataset {
            name: name.into(),
            examples,
        }
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Dataset::new(name, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Counts over labelled examples; unlabelled ones are ignored.
    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for label in self.examples.iter().filter_map(|e| e.label) {
            *c.get_mut(label) += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    pub fn ensure_unique_ids(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.len());
        for e in &self.examples {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Copy with every label removed.
    pub fn unlabeled(&self) -> Dataset {
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                label: None,
                ..e.clone()
            })
            .collect();
        Dataset::new(self.name.clone(), examples)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}
