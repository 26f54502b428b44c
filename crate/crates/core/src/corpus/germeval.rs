use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example, Label};

/// Number of trailing official training samples moved to the dev split.
pub const GERMAN_DEV_SIZE: usize = 809;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GermevalCoarse {
    Offense,
    Other,
}

impl FromStr for GermevalCoarse {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "offense" => Ok(GermevalCoarse::Offense),
            "other" => Ok(GermevalCoarse::Other),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GermevalFine {
    Other,
    Abuse,
    Insult,
    Profanity,
}

impl FromStr for GermevalFine {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "other" => Ok(GermevalFine::Other),
            "abuse" => Ok(GermevalFine::Abuse),
            "insult" => Ok(GermevalFine::Insult),
            "profanity" => Ok(GermevalFine::Profanity),
            _ => Err(()),
        }
    }
}

impl GermevalFine {
    /// Only abusive comments count as hate; insults and profanity do not.
    pub fn harmonized(self) -> Label {
        match self {
            GermevalFine::Abuse => Label::Hate,
            GermevalFine::Other | GermevalFine::Insult | GermevalFine::Profanity => Label::NoHate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawGermevalRecord {
    pub id: String,
    pub text: String,
    pub coarse_label: String,
    pub fine_label: String,
}

impl RawGermevalRecord {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        coarse_label: impl Into<String>,
        fine_label: impl Into<String>,
    ) -> Self {
        RawGermevalRecord {
            id: id.into(),
            text: text.into(),
            coarse_label: coarse_label.into(),
            fine_label: fine_label.into(),
        }
    }
}

pub fn relabel_germeval(
    records: &[RawGermevalRecord],
    name: &str,
) -> Result<Dataset, CorpusError> {
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let unknown = |label: &str| CorpusError::UnknownLabel {
            id: r.id.clone(),
            label: label.to_string(),
        };
        let fine: GermevalFine = r.fine_label.parse().map_err(|_| unknown(&r.fine_label))?;
        let coarse: GermevalCoarse = r
            .coarse_label
            .parse()
            .map_err(|_| unknown(&r.coarse_label))?;
        if fine == GermevalFine::Other && coarse != GermevalCoarse::Other {
            return Err(CorpusError::InconsistentLabels {
                id: r.id.clone(),
                coarse: r.coarse_label.clone(),
                fine: r.fine_label.clone(),
            });
        }
        examples.push(Example::new(
            r.id.clone(),
            r.text.clone(),
            Some(fine.harmonized()),
            name,
        ));
    }
    let ds = Dataset::new(name, examples);
    ds.ensure_unique_ids()?;
    Ok(ds)
}

/// Read a shared-task file: `text<TAB>coarse<TAB>fine` per line. Ids are
/// `{id_prefix}-{line number}`.
pub fn read_germeval(path: &Path, id_prefix: &str) -> Result<Vec<RawGermevalRecord>, CorpusError> {
    let f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.rsplitn(3, '\t');
        let (Some(fine), Some(coarse), Some(text)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected text<TAB>coarse<TAB>fine".into(),
            });
        };
        let id = format!("{id_prefix}-{}", i + 1);
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText { id });
        }
        out.push(RawGermevalRecord::new(id, text.trim(), coarse, fine));
    }
    Ok(out)
}

/// Move the final [`GERMAN_DEV_SIZE`] examples to a development split,
/// keeping file order in both outputs.
pub fn split_german(official_train: &Dataset) -> Result<(Dataset, Dataset), CorpusError> {
    let n = official_train.len();
    if n <= GERMAN_DEV_SIZE {
        return Err(CorpusError::TooSmall {
            name: official_train.name.clone(),
            len: n,
            min: GERMAN_DEV_SIZE + 1,
        });
    }
    let cut = n - GERMAN_DEV_SIZE;
    let train = Dataset::new("de_train", official_train.examples[..cut].to_vec());
    let dev = Dataset::new("de_dev", official_train.examples[cut..].to_vec());
    Ok((train, dev))
}
