//! Aligned cross-lingual word vectors and the text encoder for the
//! vector-based classifiers.

mod tokenize;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub use tokenize::tokenize;

/// Row reserved for padding (all zeros).
pub const PAD: usize = 0;
/// Row reserved for out-of-vocabulary tokens (mean of all loaded vectors).
pub const UNK: usize = 1;
const RESERVED: usize = 2;

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}:{line}: expected {expected} values, found {found}")]
    Dimension {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("embedding file {0} contains no vectors")]
    Empty(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Vocabulary and vectors for one language of a shared embedding space.
///
/// Row 0 is PAD, row 1 is UNK and vocabulary tokens follow in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor,
    warnings: Vec<String>,
}

/// Fixed-length index sequence; positions at or after `true_length` are PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub indices: Vec<usize>,
    pub true_length: usize,
}

impl EmbeddingTable {
    /// Build from `(token, vector)` pairs. Later duplicates are ignored with
    /// a warning.
    pub fn from_vectors<I>(dim: usize, entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let mut data = vec![0.0; RESERVED * dim];
        let mut warnings = Vec::new();
        for (n, (tok, vec)) in entries.into_iter().enumerate() {
            if vec.len() != dim {
                return Err(EmbeddingError::Dimension {
                    path: "<memory>".into(),
                    line: n + 1,
                    expected: dim,
                    found: vec.len(),
                });
            }
            if index.contains_key(&tok) {
                warnings.push(format!("duplicate token {tok:?} at entry {}", n + 1));
                continue;
            }
            index.insert(tok.clone(), tokens.len() + RESERVED);
            tokens.push(tok);
            data.extend_from_slice(&vec);
        }
        Self::finish(dim, tokens, index, data, warnings)
    }

    fn finish(
        dim: usize,
        tokens: Vec<String>,
        index: HashMap<String, usize>,
        mut data: Vec<f64>,
        warnings: Vec<String>,
    ) -> Result<Self, EmbeddingError> {
        let rows = tokens.len() + RESERVED;
        if !tokens.is_empty() {
            let mut mean = vec![0.0; dim];
            for r in RESERVED..rows {
                for (m, v) in mean.iter_mut().zip(&data[r * dim..(r + 1) * dim]) {
                    *m += v;
                }
            }
            for (slot, m) in data[UNK * dim..(UNK + 1) * dim].iter_mut().zip(&mean) {
                *slot = m / tokens.len() as f64;
            }
        }
        Ok(EmbeddingTable {
            dim,
            tokens,
            index,
            matrix: Tensor::from_vec(rows, dim, data),
            warnings,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Number of vocabulary tokens (reserved rows excluded).
    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    /// Number of matrix rows, including PAD and UNK.
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Token for a vocabulary row; `None` for PAD, UNK or out-of-range rows.
    pub fn token(&self, row: usize) -> Option<&str> {
        row.checked_sub(RESERVED)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        self.matrix.row(row)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn ensure_same_dimension(&self, other: &EmbeddingTable) -> Result<(), EmbeddingError> {
        if self.dim != other.dim {
            return Err(EmbeddingError::DimensionMismatch(self.dim, other.dim));
        }
        Ok(())
    }

    /// Write in the text vector format with a `count dim` header. Values are
    /// printed in shortest round-trip form, so reloading is bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io = |e| EmbeddingError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{} {}", self.tokens.len(), self.dim).map_err(io)?;
        for (i, tok) in self.tokens.iter().enumerate() {
            write!(w, "{tok}").map_err(io)?;
            for v in self.matrix.row(i + RESERVED) {
                write!(w, " {v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Load word vectors in text format: an optional `count dim` header, then
/// one `token v1 .. vd` line per token.
///
/// The first `max_vocab` tokens are kept in file order. A duplicated token
/// keeps its first vector and records a warning.
pub fn load_embeddings(path: &Path, max_vocab: Option<usize>) -> Result<EmbeddingTable, EmbeddingError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| EmbeddingError::Io {
        path: p.clone(),
        source: e,
    })?;
    let mut dim: Option<usize> = None;
    let mut tokens = Vec::new();
    let mut index = HashMap::new();
    let mut data = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| EmbeddingError::Io {
            path: p.clone(),
            source: e,
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                dim = Some(d);
                continue;
            }
        }
        if max_vocab.is_some_and(|m| tokens.len() >= m) {
            break;
        }
        let found = fields.len() - 1;
        let d = *dim.get_or_insert(found);
        if data.is_empty() {
            data = vec![0.0; RESERVED * d];
        }
        if found != d {
            return Err(EmbeddingError::Dimension {
                path: p,
                line: lineno,
                expected: d,
                found,
            });
        }
        let tok = fields[0];
        if index.contains_key(tok) {
            let w = format!("duplicate token {tok:?} at line {lineno}");
            log::warn!("{p}: {w}");
            warnings.push(w);
            continue;
        }
        for v in &fields[1..] {
            let x: f64 = v.parse().map_err(|_| EmbeddingError::Parse {
                path: p.clone(),
                line: lineno,
                message: format!("not a number: {v:?}"),
            })?;
            if !x.is_finite() {
                return Err(EmbeddingError::Parse {
                    path: p.clone(),
                    line: lineno,
                    message: format!("non-finite value {v:?}"),
                });
            }
            data.push(x);
        }
        index.insert(tok.to_string(), tokens.len() + RESERVED);
        tokens.push(tok.to_string());
    }
    let Some(dim) = dim else {
        return Err(EmbeddingError::Empty(p));
    };
    if data.is_empty() {
        data = vec![0.0; RESERVED * dim];
    }
    EmbeddingTable::finish(dim, tokens, index, data, warnings)
}

/// Map tokens to rows: OOV tokens become UNK, the sequence is cut at
/// `max_len` and padded with PAD.
pub fn encode<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable, max_len: usize) -> EncodedExample {
    let true_length = tokens.len().min(max_len);
    let mut indices = vec![PAD; max_len];
    for (slot, tok) in indices.iter_mut().zip(tokens) {
        *slot = table.lookup(tok.as_ref());
    }
    EncodedExample {
        indices,
        true_length,
    }
}

/// Tokens for the in-vocabulary positions of an encoded example.
pub fn decode<'t>(encoded: &EncodedExample, table: &'t EmbeddingTable) -> Vec<Option<&'t str>> {
    encoded.indices[..encoded.true_length]
        .iter()
        .map(|&i| table.token(i))
        .collect()
}
