//! Cleaning of a crawled German forum thread into tweet-like samples.
//!
//! Each newline-separated paragraph of a post is a candidate sample. Lines
//! are dropped when they are non-German, list items, overlong quotes,
//! extremely short (names, one-word answers, timestamps, salutations) or
//! visibly cut off. Two recurring crawl artefacts are repaired first.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example};

pub const FORUM_SOURCE: &str = "forum";

/// Lines longer than this (in characters) are treated as pasted quotes.
pub const MAX_LINE_CHARS: usize = 1000;
/// Lines with fewer whitespace tokens are "extremely short".
pub const MIN_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPost {
    pub id: String,
    pub text: String,
}

impl RawPost {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        RawPost {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Decides whether a line is in the target language.
pub trait LanguagePredicate {
    fn is_target_language(&self, line: &str) -> bool;
}

impl<F: Fn(&str) -> bool> LanguagePredicate for F {
    fn is_target_language(&self, line: &str) -> bool {
        self(line)
    }
}

/// Default German detector.
///
/// A line is rejected when more than 95% of its words are pure ASCII, it has
/// no umlaut or ß, and it contains none of a small set of German function
/// words. Mixed English/German lines survive through the function words.
#[derive(Debug, Clone, Copy, Default)]
pub struct AsciiHeuristic;

const GERMAN_FUNCTION_WORDS: &[&str] = &[
    "und", "der", "das", "den", "dem", "des", "ist", "nicht", "ich", "wir", "sie", "es", "ein",
    "eine", "einen", "mit", "auf", "für", "sind", "auch", "dass", "daß", "wie", "aber", "oder",
    "noch", "nur", "schon", "wenn", "doch", "hat", "haben", "werden", "wird", "zu", "von", "im",
    "bei", "nach", "kann", "mir", "mich", "uns", "euch", "sich", "diese", "dieser", "kein",
    "keine", "ja", "nein", "jetzt", "hier", "immer", "sehr",
];

impl LanguagePredicate for AsciiHeuristic {
    fn is_target_language(&self, line: &str) -> bool {
        let words: Vec<String> = line
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| w.chars().any(char::is_alphabetic))
            .collect();
        if words.is_empty() {
            return false;
        }
        if line.chars().any(|c| "äöüßÄÖÜ".contains(c)) {
            return true;
        }
        if words.iter().any(|w| GERMAN_FUNCTION_WORDS.contains(&w.as_str())) {
            return true;
        }
        let ascii = words.iter().filter(|w| w.is_ascii()).count();
        ascii as f64 / words.len() as f64 <= 0.95
    }
}

struct Patterns {
    sorry: Regex,
    dass: Regex,
    bullet: Regex,
    timestamp: Regex,
    salutation: Regex,
    cut_off: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        sorry: Regex::new(r"(?i)\b(tut\s+mir)[ \t]*(?:\r?\n[ \t]*)+(leid)\b").unwrap(),
        dass: Regex::new(r"\b([dD]) aß\b").unwrap(),
        bullet: Regex::new(r"^\s*(?:[-*•·▪●–]|\d{1,2}[.)])\s+").unwrap(),
        timestamp: Regex::new(
            r"^\W*\d{1,2}[./-]\d{1,2}(?:[./-]\d{2,4})?,?(?:\s+(?:um\s+)?\d{1,2}:\d{2}(?:\s*uhr)?)?\W*$|^\W*\d{1,2}:\d{2}(?:\s*uhr)?\W*$",
        )
        .unwrap(),
        salutation: Regex::new(
            r"(?i)^\s*(?:hallo|hi|hey|servus|moin|grüß gott|guten (?:tag|morgen|abend)|liebe grüße|viele grüße|beste grüße|schöne grüße|mit freundlichen grüßen|mfg|lg|gruß|grüße|sehr geehrte[rn]?|liebe[rs]?)\b[^.!?]{0,40}[,.!]?\s*$",
        )
        .unwrap(),
        cut_off: Regex::new(
            r"(?i)(?:[-,–]|\.\.\.|…|\b(?:und|oder|aber|weil|dass|daß|der|die|das|den|dem|ein|eine|zu|mit|von))\s*$",
        )
        .unwrap(),
    })
}

/// Apply the two literal crawl repairs to a raw post.
pub fn repair_post(text: &str) -> String {
    let p = patterns();
    let text = p.sorry.replace_all(text, "$1 $2");
    p.dass.replace_all(&text, "${1}aß").into_owned()
}

fn keep_line(line: &str, lang: &dyn LanguagePredicate) -> bool {
    let p = patterns();
    if line.is_empty() || line.chars().count() > MAX_LINE_CHARS {
        return false;
    }
    if p.bullet.is_match(line) {
        return false;
    }
    let tokens = line.split_whitespace().count();
    if tokens < MIN_TOKENS || p.timestamp.is_match(line) {
        return false;
    }
    if tokens <= 6 && p.salutation.is_match(line) {
        return false;
    }
    if p.cut_off.is_match(line) {
        return false;
    }
    lang.is_target_language(line)
}

pub fn preprocess_forum_text(posts: &[RawPost]) -> Dataset {
    preprocess_forum_text_with(posts, &AsciiHeuristic)
}

/// Ids of kept samples are `{post id}-{paragraph index}`, where the index
/// counts all lines of the repaired post.
pub fn preprocess_forum_text_with(posts: &[RawPost], lang: &dyn LanguagePredicate) -> Dataset {
    let mut examples = Vec::new();
    for post in posts {
        let repaired = repair_post(&post.text);
        for (k, line) in repaired.split('\n').enumerate() {
            let line = line.trim();
            if keep_line(line, lang) {
                examples.push(Example::new(
                    format!("{}-{k}", post.id),
                    line,
                    None,
                    FORUM_SOURCE,
                ));
            }
        }
    }
    Dataset::new("de_new", examples)
}

/// Read a crawl dump stored as JSON lines: `{"id": "...", "text": "..."}`.
pub fn read_forum_dump(path: &Path) -> Result<Vec<RawPost>, CorpusError> {
    let f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let post: RawPost = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(post);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> Vec<String> {
        preprocess_forum_text(&[RawPost::new("p", text)])
            .examples
            .into_iter()
            .map(|e| e.text)
            .collect()
    }

    #[test]
    fn split_apology_is_rejoined() {
        let out = run("Das tut mir\nleid, ich wollte das nicht sagen.");
        assert_eq!(out, ["Das tut mir leid, ich wollte das nicht sagen."]);
    }

    #[test]
    fn broken_dass_is_repaired() {
        let out = run("Ich glaube, d aß wir bald mehr wissen werden.");
        assert_eq!(out, ["Ich glaube, daß wir bald mehr wissen werden."]);
    }

    #[test]
    fn long_quotes_are_dropped_short_ones_kept() {
        let long = format!("„{}“", "Das ist ein sehr langer Artikel. ".repeat(46));
        assert!(long.chars().count() > 1000);
        assert!(run(&long).is_empty());
        let short = "„Die Regierung plant neue Gesetze für den Herbst.“";
        assert_eq!(run(short), [short]);
    }

    #[test]
    fn short_lines_and_salutations_are_dropped() {
        assert!(run("Danke").is_empty());
        assert!(run("Hans Müller").is_empty());
        assert!(run("12.03.2015, 14:33 Uhr").is_empty());
        assert!(run("Mit freundlichen Grüßen").is_empty());
        assert!(run("Hallo zusammen,").is_empty());
    }

    #[test]
    fn bullets_cutoffs_and_english_are_dropped() {
        assert!(run("- erstens sind die Preise gestiegen").is_empty());
        assert!(run("2) zweitens ist das Wetter schlecht").is_empty());
        assert!(run("Wir haben gestern noch lange darüber geredet und").is_empty());
        assert!(run("This is just an English sentence about the weather.").is_empty());
    }

    #[test]
    fn mixed_language_and_dialogue_lines_are_kept() {
        let out = run("Frage: Wie geht es Ihnen heute?\nAntwort: Mir geht es gut.\nDas ist einfach nicht fair, sorry.");
        assert_eq!(out.len(), 3);
        let mixed = run("That's the point, das ist doch klar.");
        assert_eq!(mixed.len(), 1);
    }

    #[test]
    fn ids_follow_paragraph_positions() {
        let ds = preprocess_forum_text(&[RawPost::new("42", "Danke\nDas ist eine gute Idee.")]);
        assert_eq!(ds.examples[0].id, "42-1");
        assert!(ds.examples[0].label.is_none());
    }

    #[test]
    fn custom_predicate_is_used() {
        let ds = preprocess_forum_text_with(
            &[RawPost::new("1", "This is plain English text here.")],
            &|_: &str| true,
        );
        assert_eq!(ds.len(), 1);
    }
}
