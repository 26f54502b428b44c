use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassCounts, CorpusError, Dataset, Example, Label};

pub const STORMFRONT_SOURCE: &str = "stormfront";

/// Annotation classes of the English forum corpus before harmonisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StormfrontLabel {
    NoHate,
    Hate,
    Relation,
    Skip,
}

impl FromStr for StormfrontLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nohate" => Ok(StormfrontLabel::NoHate),
            "hate" => Ok(StormfrontLabel::Hate),
            "relation" => Ok(StormfrontLabel::Relation),
            "skip" => Ok(StormfrontLabel::Skip),
            _ => Err(()),
        }
    }
}

impl StormfrontLabel {
    /// Relation samples are hateful in context; Skip samples are non-English
    /// or uninformative.
    pub fn harmonized(self) -> Label {
        match self {
            StormfrontLabel::NoHate | StormfrontLabel::Skip => Label::NoHate,
            StormfrontLabel::Hate | StormfrontLabel::Relation => Label::Hate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawStormfrontRecord {
    pub id: String,
    pub text: String,
    pub raw_label: String,
}

impl RawStormfrontRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, raw_label: impl Into<String>) -> Self {
        RawStormfrontRecord {
            id: id.into(),
            text: text.into(),
            raw_label: raw_label.into(),
        }
    }
}

pub fn relabel_stormfront(records: &[RawStormfrontRecord]) -> Result<Dataset, CorpusError> {
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let raw: StormfrontLabel =
            r.raw_label
                .parse()
                .map_err(|_| CorpusError::UnknownLabel {
                    id: r.id.clone(),
                    label: r.raw_label.clone(),
                })?;
        examples.push(Example::new(
            r.id.clone(),
            r.text.clone(),
            Some(raw.harmonized()),
            STORMFRONT_SOURCE,
        ));
    }
    let ds = Dataset::new(STORMFRONT_SOURCE, examples);
    ds.ensure_unique_ids()?;
    Ok(ds)
}

/// Read the per-sample text files and the annotation metadata CSV
/// (`file_id`, `label` columns; other columns ignored). Records come back in
/// CSV order.
pub fn read_stormfront(
    files_dir: &Path,
    metadata_csv: &Path,
) -> Result<Vec<RawStormfrontRecord>, CorpusError> {
    let mut rdr = csv::Reader::from_path(metadata_csv)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::Parse {
                path: metadata_csv.display().to_string(),
                line: 1,
                message: format!("missing column {name}"),
            })
    };
    let (id_col, label_col) = (col("file_id")?, col("label")?);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(id_col).unwrap_or_default().trim().to_string();
        let label = row.get(label_col).unwrap_or_default().trim().to_string();
        let path = files_dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(CorpusError::EmptyText { id });
        }
        out.push(RawStormfrontRecord::new(id, text, label));
    }
    Ok(out)
}

/// Requested class counts per English split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnglishSplitCounts {
    pub test: ClassCounts,
    pub dev: ClassCounts,
    /// `None` assigns every remaining example to the training split.
    pub train: Option<ClassCounts>,
}

impl Default for EnglishSplitCounts {
    fn default() -> Self {
        EnglishSplitCounts {
            test: ClassCounts::new(427, 63),
            dev: ClassCounts::new(134, 20),
            train: Some(ClassCounts::new(9018, 1281)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnglishSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// Examples left over when the training counts are fixed explicitly.
    pub unassigned: Dataset,
}

/// Stratified selection without replacement. Every input example lands in
/// exactly one of the four outputs; each output keeps the input order.
pub fn split_english(
    full: &Dataset,
    counts: &EnglishSplitCounts,
    seed: u64,
) -> Result<EnglishSplits, CorpusError> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in full.examples.iter().enumerate() {
        let label = e
            .label
            .ok_or_else(|| CorpusError::Unlabeled { id: e.id.clone() })?;
        by_class[label.index()].push(i);
    }

    // bucket per example: 0 test, 1 dev, 2 train, 3 unassigned
    let mut bucket = vec![3u8; full.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in Label::ALL {
        let pool = &mut by_class[label.index()];
        let (t, d) = (counts.test.get(label), counts.dev.get(label));
        let tr = counts.train.map(|c| c.get(label));
        let requested = t + d + tr.unwrap_or(0);
        if requested > pool.len() {
            return Err(CorpusError::Shortfall {
                label,
                requested,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        let tr = tr.unwrap_or(pool.len() - t - d);
        for (k, &i) in pool.iter().enumerate() {
            bucket[i] = if k < t {
                0
            } else if k < t + d {
                1
            } else if k < t + d + tr {
                2
            } else {
                3
            };
        }
    }

    let pick = |b: u8, name: &str| {
        let examples = full
            .examples
            .iter()
            .zip(&bucket)
            .filter(|(_, &k)| k == b)
            .map(|(e, _)| e.clone())
            .collect();
        Dataset::new(name, examples)
    };
    Ok(EnglishSplits {
        test: pick(0, "en_test"),
        dev: pick(1, "en_dev"),
        train: pick(2, "en_train"),
        unassigned: pick(3, "en_unassigned"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(counts: &[(&str, usize)]) -> Vec<RawStormfrontRecord> {
        let mut out = Vec::new();
        for (label, n) in counts {
            for _ in 0..*n {
                let id = format!("{}", out.len());
                out.push(RawStormfrontRecord::new(id.clone(), format!("text {id}"), *label));
            }
        }
        out
    }

    #[test]
    fn skip_becomes_no_hate_and_relation_becomes_hate() {
        let ds = relabel_stormfront(&records(&[("skip", 1), ("relation", 1), ("hate", 1), ("noHate", 1)]))
            .unwrap();
        let labels: Vec<_> = ds.examples.iter().map(|e| e.label.unwrap()).collect();
        assert_eq!(labels, [Label::NoHate, Label::Hate, Label::Hate, Label::NoHate]);
    }

    #[test]
    fn published_counts_harmonise_to_9580_and_1364() {
        let ds = relabel_stormfront(&records(&[
            ("noHate", 9488),
            ("hate", 1196),
            ("relation", 168),
            ("skip", 92),
        ]))
        .unwrap();
        assert_eq!(ds.class_counts(), ClassCounts::new(9580, 1364));
        assert_eq!(ds.len(), 10944);
    }

    #[test]
    fn unknown_label_names_the_record() {
        let mut r = records(&[("hate", 2)]);
        r[1].raw_label = "idk".into();
        let err = relabel_stormfront(&r).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { ref id, .. } if id == "1"), "{err}");
    }

    #[test]
    fn split_is_seeded_and_exhaustive() {
        let ds = relabel_stormfront(&records(&[("noHate", 60), ("hate", 20)])).unwrap();
        let counts = EnglishSplitCounts {
            test: ClassCounts::new(10, 4),
            dev: ClassCounts::new(5, 2),
            train: Some(ClassCounts::new(40, 14)),
        };
        let a = split_english(&ds, &counts, 3).unwrap();
        let b = split_english(&ds, &counts, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.class_counts(), ClassCounts::new(10, 4));
        assert_eq!(a.dev.class_counts(), ClassCounts::new(5, 2));
        assert_eq!(a.train.class_counts(), ClassCounts::new(40, 14));
        assert_eq!(a.unassigned.class_counts(), ClassCounts::new(5, 0));
        let mut all: Vec<&str> = [&a.train, &a.dev, &a.test, &a.unassigned]
            .iter()
            .flat_map(|d| d.ids())
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 80);

        let c = split_english(&ds, &counts, 4).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn split_rejects_shortfall() {
        let ds = relabel_stormfront(&records(&[("noHate", 600), ("hate", 70)])).unwrap();
        let counts = EnglishSplitCounts {
            test: ClassCounts::new(427, 2000),
            dev: ClassCounts::new(134, 20),
            train: None,
        };
        let err = split_english(&ds, &counts, 1).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Shortfall { label: Label::Hate, requested: 2020, .. }
        ));
    }
}
