//! Confusion matrices, classwise and macro precision/recall/F1, and
//! comparison tables.
//!
//! All percentages are kept at full precision. Rounding (half-up, two
//! decimals) happens only when a value is rendered.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("cannot evaluate an empty label sequence")]
    Empty,
    #[error("no reports to compare")]
    NoReports,
    #[error("baseline index {index} out of range for {len} reports")]
    BadBaseline { index: usize, len: usize },
}

/// 2x2 counts with gold labels on rows and predictions on columns, in class
/// order (noHate, Hate).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn cell(&self, gold: Label, pred: Label) -> u64 {
        self.counts[gold.index()][pred.index()]
    }

    pub fn add(&mut self, gold: Label, pred: Label) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, gold: Label) -> u64 {
        self.counts[gold.index()].iter().sum()
    }

    pub fn column_total(&self, pred: Label) -> u64 {
        self.counts.iter().map(|r| r[pred.index()]).sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn scaled(&self, k: u64) -> Self {
        let mut out = *self;
        for v in out.counts.iter_mut().flatten() {
            *v *= k;
        }
        out
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8}", "", "noHate", "Hate")?;
        for gold in Label::ALL {
            writeln!(
                f,
                "{:>8} {:>8} {:>8}",
                gold.as_str(),
                self.cell(gold, Label::NoHate),
                self.cell(gold, Label::Hate)
            )?;
        }
        Ok(())
    }
}

pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for (&g, &p) in gold.iter().zip(pred) {
        m.add(g, p);
    }
    Ok(m)
}

/// Precision, recall and F1 of one class, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predictions of this class: precision reported as 0.
    pub precision_undefined: bool,
    /// No gold examples of this class: recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Identifies what was evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub dataset: String,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ReportMeta {
    pub fn new(model: impl Into<String>, dataset: impl Into<String>, stage: impl Into<String>) -> Self {
        ReportMeta {
            model: model.into(),
            dataset: dataset.into(),
            stage: stage.into(),
            config_hash: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub accuracy: f64,
    pub no_hate: ClassScores,
    pub hate: ClassScores,
    #[serde(rename = "macro")]
    pub macro_avg: MacroScores,
    pub matrix: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (100.0 * num as f64 / den as f64, false)
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn class_scores(m: &ConfusionMatrix, label: Label) -> ClassScores {
    let diag = m.cell(label, label);
    let (precision, precision_undefined) = ratio(diag, m.column_total(label));
    let (recall, recall_undefined) = ratio(diag, m.row_total(label));
    ClassScores {
        precision,
        recall,
        f1: f1(precision, recall),
        precision_undefined,
        recall_undefined,
    }
}

pub fn metrics(matrix: &ConfusionMatrix, meta: ReportMeta) -> Result<EvalReport, EvalError> {
    if matrix.total() == 0 {
        return Err(EvalError::Empty);
    }
    let no_hate = class_scores(matrix, Label::NoHate);
    let hate = class_scores(matrix, Label::Hate);
    Ok(EvalReport {
        meta,
        accuracy: 100.0 * matrix.trace() as f64 / matrix.total() as f64,
        no_hate,
        hate,
        macro_avg: MacroScores {
            precision: (no_hate.precision + hate.precision) / 2.0,
            recall: (no_hate.recall + hate.recall) / 2.0,
            f1: (no_hate.f1 + hate.f1) / 2.0,
        },
        matrix: *matrix,
    })
}

/// Shortcut: confusion followed by metrics.
pub fn evaluate_labels(gold: &[Label], pred: &[Label], meta: ReportMeta) -> Result<EvalReport, EvalError> {
    metrics(&confusion(gold, pred)?, meta)
}

/// Round half away from zero at two decimals.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    // absorb representation error such as 87.705 -> 8770.499999
    let nudged = scaled + scaled.signum() * 1e-9;
    nudged.round() / 100.0
}

pub fn fmt2(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        "0.00".to_string()
    } else {
        format!("{r:.2}")
    }
}

pub const METRIC_NAMES: [&str; 10] = [
    "accuracy",
    "noHate_P",
    "noHate_R",
    "noHate_F1",
    "Hate_P",
    "Hate_R",
    "Hate_F1",
    "macro_P",
    "macro_R",
    "macro_F1",
];

impl EvalReport {
    /// The ten table columns in reporting order.
    pub fn values(&self) -> [f64; 10] {
        [
            self.accuracy,
            self.no_hate.precision,
            self.no_hate.recall,
            self.no_hate.f1,
            self.hate.precision,
            self.hate.recall,
            self.hate.f1,
            self.macro_avg.precision,
            self.macro_avg.recall,
            self.macro_avg.f1,
        ]
    }

    pub fn scores(&self, label: Label) -> &ClassScores {
        match label {
            Label::NoHate => &self.no_hate,
            Label::Hate => &self.hate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} on {} ({})",
            self.meta.model, self.meta.dataset, self.meta.stage
        )?;
        writeln!(f, "accuracy {}", fmt2(self.accuracy))?;
        for (name, s) in [("noHate", &self.no_hate), ("Hate", &self.hate)] {
            let mark = |u: bool| if u { "*" } else { "" };
            writeln!(
                f,
                "{name:<7} P {}{} R {}{} F1 {}",
                fmt2(s.precision),
                mark(s.precision_undefined),
                fmt2(s.recall),
                mark(s.recall_undefined),
                fmt2(s.f1)
            )?;
        }
        writeln!(
            f,
            "macro   P {} R {} F1 {}",
            fmt2(self.macro_avg.precision),
            fmt2(self.macro_avg.recall),
            fmt2(self.macro_avg.f1)
        )?;
        write!(f, "{}", self.matrix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub stage: String,
    pub dataset: String,
    pub values: [f64; 10],
    /// Differences to the baseline, taken between the two-decimal values
    /// that the table displays.
    pub deltas: [f64; 10],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: usize,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[EvalReport], baseline: usize) -> Result<Comparison, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    if baseline >= reports.len() {
        return Err(EvalError::BadBaseline {
            index: baseline,
            len: reports.len(),
        });
    }
    let base = reports[baseline].values().map(round2);
    let rows = reports
        .iter()
        .map(|r| {
            let values = r.values();
            let mut deltas = [0.0; 10];
            for i in 0..10 {
                deltas[i] = round2(round2(values[i]) - base[i]);
            }
            ComparisonRow {
                model: r.meta.model.clone(),
                stage: r.meta.stage.clone(),
                dataset: r.meta.dataset.clone(),
                values,
                deltas,
            }
        })
        .collect();
    Ok(Comparison { baseline, rows })
}

fn signed(x: f64) -> String {
    let s = fmt2(x);
    if round2(x) > 0.0 {
        format!("+{s}")
    } else {
        s
    }
}

impl Comparison {
    /// Aligned plain-text table with the macro-F1 delta as last column.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:<14} {:<12}", "model", "stage", "dataset");
        for name in METRIC_NAMES {
            let _ = write!(out, " {name:>9}");
        }
        let _ = writeln!(out, " {:>9}", "d_macroF1");
        for r in &self.rows {
            let _ = write!(out, "{:<12} {:<14} {:<12}", r.model, r.stage, r.dataset);
            for v in r.values {
                let _ = write!(out, " {:>9}", fmt2(v));
            }
            let _ = writeln!(out, " {:>9}", signed(r.deltas[9]));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "stage".into(), "dataset".into()];
        header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
        header.extend(METRIC_NAMES.iter().map(|s| format!("delta_{s}")));
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.model.clone(), r.stage.clone(), r.dataset.clone()];
            rec.extend(r.values.iter().map(|&v| fmt2(v)));
            rec.extend(r.deltas.iter().map(|&v| fmt2(v)));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> ReportMeta {
        ReportMeta::new("m", "d", "s")
    }

    fn labels(n_no: usize, n_hate: usize) -> Vec<Label> {
        let mut v = vec![Label::NoHate; n_no];
        v.extend(vec![Label::Hate; n_hate]);
        v
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let gold = labels(2759, 773);
        let m = confusion(&gold, &gold).unwrap();
        assert_eq!(m.counts, [[2759, 0], [0, 773]]);
        let r = metrics(&m, meta()).unwrap();
        for v in r.values() {
            assert_eq!(fmt2(v), "100.00");
        }
    }

    #[test]
    fn single_miss() {
        let m = confusion(&[Label::Hate], &[Label::NoHate]).unwrap();
        assert_eq!(m.counts, [[0, 0], [1, 0]]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            confusion(&[Label::Hate], &[]),
            Err(EvalError::LengthMismatch { gold: 1, pred: 0 })
        );
        assert_eq!(confusion(&[], &[]), Err(EvalError::Empty));
        assert_eq!(compare(&[], 0), Err(EvalError::NoReports));
    }

    #[test]
    fn all_no_hate_predictor() {
        let gold = labels(2759, 773);
        let pred = vec![Label::NoHate; gold.len()];
        let r = evaluate_labels(&gold, &pred, meta()).unwrap();
        assert_eq!(fmt2(r.no_hate.precision), "78.11");
        assert_eq!(fmt2(r.no_hate.recall), "100.00");
        assert_eq!(fmt2(r.no_hate.f1), "87.71");
        assert_eq!(fmt2(r.hate.precision), "0.00");
        assert!(r.hate.precision_undefined);
        assert!(!r.hate.recall_undefined);
        assert_eq!(fmt2(r.hate.recall), "0.00");
        assert_eq!(fmt2(r.hate.f1), "0.00");
        assert_eq!(fmt2(r.macro_avg.f1), "43.86");
    }

    #[test]
    fn audit_matrix_precision_and_recall() {
        let m = ConfusionMatrix::from_counts([[2688, 42], [573, 34]]);
        let r = metrics(&m, meta()).unwrap();
        // independent arithmetic: 34/76 and 34/607
        assert!((r.hate.precision - 3400.0 / 76.0).abs() < 1e-12);
        assert!((r.hate.recall - 3400.0 / 607.0).abs() < 1e-12);
        assert_eq!(fmt2(r.hate.precision), "44.74");
        assert_eq!(fmt2(r.hate.recall), "5.60");
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(fmt2(87.705), "87.71");
        assert_eq!(fmt2(0.125), "0.13");
        assert_eq!(fmt2(-0.125), "-0.13");
        assert_eq!(fmt2(43.8572), "43.86");
    }

    #[test]
    fn compare_deltas() {
        let mut a = metrics(&ConfusionMatrix::from_counts([[5, 1], [1, 5]]), meta()).unwrap();
        a.macro_avg.f1 = 48.28;
        let mut b = a.clone();
        b.macro_avg.f1 = 48.77;
        b.meta.stage = "fine-tuned".into();
        let c = compare(&[a.clone(), b], 0).unwrap();
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.rows[0].deltas, [0.0; 10]);
        assert_eq!(fmt2(c.rows[1].deltas[9]), "0.49");
        assert!(c.to_text().contains("+0.49"));
        assert_eq!(c.to_csv().lines().count(), 3);

        let one = compare(std::slice::from_ref(&a), 0).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.rows[0].deltas, [0.0; 10]);
    }

    #[test]
    fn json_round_trip() {
        let r = metrics(&ConfusionMatrix::from_counts([[3, 1], [2, 7]]), meta()).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        proptest::array::uniform4(0u64..500).prop_filter_map("non-empty", |c| {
            let m = ConfusionMatrix::from_counts([[c[0], c[1]], [c[2], c[3]]]);
            (m.total() > 0).then_some(m)
        })
    }

    proptest! {
        #[test]
        fn permutation_invariance(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..60), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let to = |i| Label::from_index(i).unwrap();
            let gold: Vec<_> = pairs.iter().map(|p| to(p.0)).collect();
            let pred: Vec<_> = pairs.iter().map(|p| to(p.1)).collect();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let g2: Vec<_> = shuffled.iter().map(|p| to(p.0)).collect();
            let p2: Vec<_> = shuffled.iter().map(|p| to(p.1)).collect();
            prop_assert_eq!(confusion(&gold, &pred).unwrap(), confusion(&g2, &p2).unwrap());
            prop_assert_eq!(confusion(&gold, &pred).unwrap().total(), pairs.len() as u64);
        }

        #[test]
        fn scale_consistency(m in matrix(), k in 1u64..50) {
            let a = metrics(&m, meta()).unwrap();
            let b = metrics(&m.scaled(k), meta()).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn structural_identities(m in matrix()) {
            let r = metrics(&m, meta()).unwrap();
            for s in [&r.no_hate, &r.hate] {
                let expect = if s.precision + s.recall == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / (s.precision + s.recall) };
                prop_assert!((s.f1 - expect).abs() < 1e-9);
            }
            prop_assert!((r.macro_avg.f1 - (r.no_hate.f1 + r.hate.f1) / 2.0).abs() < 1e-12);
            prop_assert!((r.macro_avg.precision - (r.no_hate.precision + r.hate.precision) / 2.0).abs() < 1e-12);
            // accuracy equals recall weighted by gold-row mass
            let total = m.total() as f64;
            let weighted = Label::ALL
                .iter()
                .map(|&l| r.scores(l).recall * m.row_total(l) as f64 / total)
                .sum::<f64>();
            prop_assert!((r.accuracy - weighted).abs() < 1e-9);
        }
    }
}
