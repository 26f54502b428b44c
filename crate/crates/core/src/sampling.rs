//! Random over- and undersampling to a target noHate:Hate ratio.
//!
//! The class that is not adjusted keeps its count; the adjusted class is set
//! to `floor(fixed * its_ratio_component / other_component)`. Every published
//! sampled dataset is integral under this rule, so those counts are hit
//! exactly.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassCounts, Dataset, Example, Label};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("example {id} has no label")]
    Unlabeled { id: String },
    #[error("dataset {name} needs at least one example of each class, has {counts}")]
    MissingClass { name: String, counts: ClassCounts },
    #[error("undersampling {name} to {ratio} would leave no {label} examples")]
    Unreachable {
        name: String,
        ratio: Ratio,
        label: Label,
    },
    #[error("invalid sampling spec {0:?}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingMode {
    Oversample,
    Undersample,
}

impl SamplingMode {
    pub fn tag(self) -> &'static str {
        match self {
            SamplingMode::Oversample => "OS",
            SamplingMode::Undersample => "US",
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Oversample => "oversample",
            SamplingMode::Undersample => "undersample",
        })
    }
}

/// noHate:Hate target ratio, both components at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub no_hate: u32,
    pub hate: u32,
}

impl Ratio {
    pub fn new(no_hate: u32, hate: u32) -> Result<Self, SamplingError> {
        if no_hate == 0 || hate == 0 {
            return Err(SamplingError::Parse(format!("{no_hate}:{hate}")));
        }
        Ok(Ratio { no_hate, hate })
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.no_hate, self.hate)
    }
}

impl FromStr for Ratio {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SamplingError::Parse(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        Ratio::new(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub ratio: Ratio,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn new(ratio: Ratio, mode: SamplingMode, seed: u64) -> Self {
        SamplingSpec { ratio, mode, seed }
    }

    /// Conventional dataset name, e.g. `DE-OS[7:1]` for prefix `DE`.
    pub fn dataset_name(&self, prefix: &str) -> String {
        format!("{prefix}-{}[{}]", self.mode.tag(), self.ratio)
    }
}

impl fmt::Display for SamplingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ratio={} mode={} seed={}", self.ratio, self.mode, self.seed)
    }
}

/// Parses `ratio=7:1 mode=undersample seed=N`. The seed may be omitted (0).
impl FromStr for SamplingSpec {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SamplingError::Parse(s.to_string());
        let (mut ratio, mut mode, mut seed) = (None, None, 0u64);
        for part in s.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "ratio" => ratio = Some(v.parse::<Ratio>()?),
                "mode" => {
                    mode = Some(match v.to_ascii_lowercase().as_str() {
                        "oversample" | "os" => SamplingMode::Oversample,
                        "undersample" | "us" => SamplingMode::Undersample,
                        _ => return Err(bad()),
                    })
                }
                "seed" => seed = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(SamplingSpec {
            ratio: ratio.ok_or_else(bad)?,
            mode: mode.ok_or_else(bad)?,
            seed,
        })
    }
}

pub fn class_counts(dataset: &Dataset) -> Result<ClassCounts, SamplingError> {
    if let Some(e) = dataset.examples.iter().find(|e| e.label.is_none()) {
        return Err(SamplingError::Unlabeled { id: e.id.clone() });
    }
    Ok(dataset.class_counts())
}

/// Class counts that `resample` will produce for `counts` under `spec`.
pub fn target_counts(
    counts: ClassCounts,
    spec: &SamplingSpec,
    name: &str,
) -> Result<ClassCounts, SamplingError> {
    if counts.no_hate == 0 || counts.hate == 0 {
        return Err(SamplingError::MissingClass {
            name: name.to_string(),
            counts,
        });
    }
    let (a, b) = (spec.ratio.no_hate as u128, spec.ratio.hate as u128);
    let (n, h) = (counts.no_hate as u128, counts.hate as u128);
    // noHate is over-represented relative to the target when n/h > a/b
    let no_hate_heavy = n * b > h * a;
    let balanced = n * b == h * a;
    let mut out = counts;
    if balanced {
        return Ok(out);
    }
    match spec.mode {
        SamplingMode::Oversample => {
            if no_hate_heavy {
                out.hate = (n * b / a) as usize;
            } else {
                out.no_hate = (h * a / b) as usize;
            }
        }
        SamplingMode::Undersample => {
            if no_hate_heavy {
                out.no_hate = (h * a / b) as usize;
            } else {
                out.hate = (n * b / a) as usize;
            }
        }
    }
    for label in Label::ALL {
        if out.get(label) == 0 {
            return Err(SamplingError::Unreachable {
                name: name.to_string(),
                ratio: spec.ratio,
                label,
            });
        }
    }
    Ok(out)
}

/// Resample to the target ratio.
///
/// Oversampling duplicates examples of the deficient class drawn uniformly
/// with replacement; undersampling removes a uniform subset of the excess
/// class. Survivors keep their relative order, duplicates are appended and
/// the whole sequence is then shuffled with the spec's seed.
pub fn resample(dataset: &Dataset, spec: &SamplingSpec) -> Result<Dataset, SamplingError> {
    let counts = class_counts(dataset)?;
    let target = target_counts(counts, spec, &dataset.name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in dataset.examples.iter().enumerate() {
        by_class[e.label.expect("checked above").index()].push(i);
    }

    let mut keep = vec![true; dataset.len()];
    let mut duplicates: Vec<usize> = Vec::new();
    for label in Label::ALL {
        let pool = &by_class[label.index()];
        let (have, want) = (pool.len(), target.get(label));
        if want < have {
            let mut drop = pool.clone();
            drop.shuffle(&mut rng);
            for &i in &drop[..have - want] {
                keep[i] = false;
            }
        } else if want > have {
            for _ in 0..want - have {
                duplicates.push(pool[rng.random_range(0..have)]);
            }
        }
    }

    let mut examples: Vec<Example> = dataset
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    examples.extend(duplicates.iter().map(|&i| dataset.examples[i].clone()));
    examples.shuffle(&mut rng);
    Ok(Dataset::new(dataset.name.clone(), examples))
}

/// Keep at most `max` examples, preserving the class proportions (each
/// class gets `floor(max * share)`, at least one while it has any) and the
/// input order.
pub fn subsample(dataset: &Dataset, max: usize, seed: u64) -> Result<Dataset, SamplingError> {
    if dataset.len() <= max {
        return Ok(dataset.clone());
    }
    let counts = class_counts(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for label in Label::ALL {
        let mut pool: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.examples[i].label == Some(label))
            .collect();
        let have = counts.get(label);
        let want = (max * have / dataset.len()).max(have.min(1));
        pool.shuffle(&mut rng);
        for &i in &pool[..want] {
            keep[i] = true;
        }
    }
    let examples = dataset
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Dataset::new(dataset.name.clone(), examples))
}
