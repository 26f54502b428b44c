//! Canonical on-disk sample format: one `id<TAB>label<TAB>text` line per
//! example, UTF-8. Unlabelled examples leave the label field empty.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CorpusError, Dataset, Example, Label};

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

pub fn write_tsv_to<W: Write>(dataset: &Dataset, mut w: W) -> std::io::Result<()> {
    for e in &dataset.examples {
        let label = e.label.map(Label::as_str).unwrap_or("");
        writeln!(
            w,
            "{}\t{}\t{}",
            escape_field(&e.id),
            label,
            escape_field(&e.text)
        )?;
    }
    w.flush()
}

pub fn write_tsv(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
        }
    }
    let f = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_tsv_to(dataset, BufWriter::new(f)).map_err(|e| CorpusError::io(path, e))
}

/// Read a canonical TSV file. The dataset is named after the file stem and
/// each example's `source` is set to that name.
pub fn read_tsv(path: &Path) -> Result<Dataset, CorpusError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(label), Some(text)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("expected 3 tab-separated fields".into()));
        };
        let label = if label.is_empty() {
            None
        } else {
            Some(label.parse::<Label>().map_err(parse_err)?)
        };
        examples.push(Example::new(
            unescape_field(id),
            unescape_field(text),
            label,
            name.clone(),
        ));
    }
    Ok(Dataset::new(name, examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn escape_round_trips(s in "\\PC*|[\\t\\n\\r\\\\a-z]*") {
            prop_assert_eq!(unescape_field(&escape_field(&s)), s.clone());
            prop_assert!(!escape_field(&s).contains('\t'));
            prop_assert!(!escape_field(&s).contains('\n'));
        }
    }

    #[test]
    fn file_round_trip_keeps_unlabelled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("de_test.tsv");
        let ds = Dataset::new(
            "de_test",
            vec![
                Example::new("1", "Zeile\tmit\nUmbruch", Some(Label::Hate), "de_test"),
                Example::new("2", "ohne Label", None, "de_test"),
            ],
        );
        write_tsv(&ds, &path).unwrap();
        let back = read_tsv(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        std::fs::write(&path, "a\tHate\tok\nb\tRelation\tbad\n").unwrap();
        let err = read_tsv(&path).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }
}
