//! BERT-style tokenisation: basic whitespace/punctuation splitting followed
//! by greedy longest-match WordPiece.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::models::ModelError;

pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_TOKEN: &str = "[PAD]";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct WordPiece {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    lowercase: bool,
    unk: usize,
    cls: usize,
    sep: usize,
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control() && !c.is_ascii())
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

impl WordPiece {
    pub fn new(tokens: Vec<String>, lowercase: bool) -> Result<Self, ModelError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Config(format!("vocabulary lacks {name}")))
        };
        Ok(WordPiece {
            unk: special(UNK_TOKEN)?,
            cls: special(CLS_TOKEN)?,
            sep: special(SEP_TOKEN)?,
            tokens,
            index,
            lowercase,
        })
    }

    /// One token per line; the line number is the id.
    pub fn from_file(path: &Path, lowercase: bool) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Self::new(tokens, lowercase)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| ModelError::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn basic_tokens(&self, text: &str) -> Vec<String> {
        let mut spaced = String::with_capacity(text.len());
        for c in text.chars() {
            if c == '\u{0}' || c == '\u{fffd}' || (c.is_control() && !c.is_whitespace()) {
                continue;
            }
            if is_cjk(c) {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else if c.is_whitespace() {
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        let mut out = Vec::new();
        for word in spaced.split_whitespace() {
            let word: String = if self.lowercase {
                word.to_lowercase().nfd().filter(|c| !is_combining_mark(*c)).collect()
            } else {
                word.to_string()
            };
            let mut current = String::new();
            for c in word.chars() {
                if is_punctuation(c) {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Subword ids without special tokens.
    pub fn tokenize_ids(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in self.basic_tokens(text) {
            self.word_pieces(&word, &mut out);
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<&str> {
        self.tokenize_ids(text)
            .into_iter()
            .map(|i| self.tokens[i].as_str())
            .collect()
    }

    /// `[CLS] pieces [SEP]`, truncated so the whole sequence fits `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.tokenize_ids(text);
        ids.truncate(max_len.saturating_sub(2));
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(self.cls);
        out.extend(ids);
        out.push(self.sep);
        out
    }
}
