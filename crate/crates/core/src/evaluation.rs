//! Session metrics and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::predict_rows;
use crate::data::SessionDataset;
use crate::error::{Error, Result};
use crate::trainer::ModelState;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub session: usize,
    pub joint: f64,
    /// Accuracy on rows of session-0 classes.
    pub base: f64,
    /// Accuracy on rows of later classes; `None` when there are none.
    pub novel: Option<f64>,
    pub harmonic: Option<f64>,
    /// `(actual, predicted) -> count`
    pub confusion: BTreeMap<(u32, u32), usize>,
}

impl SessionMetrics {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            session: self.session,
            joint: self.joint,
            base: self.base,
            novel: self.novel,
            harmonic: self.harmonic,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.values().sum()
    }

    pub fn correct(&self) -> usize {
        self.confusion
            .iter()
            .filter(|((a, p), _)| a == p)
            .map(|(_, n)| n)
            .sum()
    }
}

/// `2ab/(a+b)`, or 0 when both are 0. Equal arguments come back unchanged
/// rather than through the rounded quotient.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn mean_accuracy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::State("no sessions to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Score every test row against the real prototypes of sessions `0..=t`.
pub fn evaluate_session(state: &ModelState, test: &SessionDataset, t: usize) -> Result<SessionMetrics> {
    if state.sessions.len() <= t {
        return Err(Error::State(format!(
            "session {t} has not been trained ({} sessions available)",
            state.sessions.len()
        )));
    }
    let sets: Vec<_> = state.sessions[..=t].iter().collect();
    let seen: BTreeSet<u32> = sets.iter().flat_map(|s| s.labels().iter().copied()).collect();
    if let Some(l) = test.labels.iter().find(|l| !seen.contains(l)) {
        return Err(Error::config(format!("test label {l} has not been seen by session {t}")));
    }
    if test.is_empty() {
        return Err(Error::config(format!("session {t}: empty test set")));
    }
    let base_labels: BTreeSet<u32> = state.sessions[0].labels().iter().copied().collect();
    let predicted = predict_rows(&state.coefficients(&test.features)?, &sets)?;

    let mut confusion = BTreeMap::new();
    let (mut base_hit, mut base_n, mut novel_hit, mut novel_n) = (0, 0, 0, 0);
    for (&actual, &guess) in test.labels.iter().zip(&predicted) {
        *confusion.entry((actual, guess)).or_insert(0) += 1;
        let hit = usize::from(actual == guess);
        if base_labels.contains(&actual) {
            base_hit += hit;
            base_n += 1;
        } else {
            novel_hit += hit;
            novel_n += 1;
        }
    }
    let base = ratio(base_hit, base_n).unwrap_or(0.0);
    let novel = if t == 0 { None } else { ratio(novel_hit, novel_n) };
    Ok(SessionMetrics {
        session: t,
        joint: (base_hit + novel_hit) as f64 / test.len() as f64,
        base,
        novel,
        harmonic: novel.map(|n| harmonic_mean(base, n)),
        confusion,
    })
}

/// The metric columns of one session, as written to CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub session: usize,
    pub joint: f64,
    pub base: f64,
    pub novel: Option<f64>,
    pub harmonic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub variant: String,
    pub sessions: Vec<SessionMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

pub const CSV_HEADER: [&str; 5] = ["session", "joint", "base", "novel", "harmonic"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvaluationReport {
    pub fn new(variant: impl Into<String>) -> Self {
        Self {
            variant: variant.into(),
            sessions: Vec::new(),
        }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.sessions.iter().map(SessionMetrics::row).collect()
    }

    /// Mean of the per-session joint accuracies.
    pub fn average_accuracy(&self) -> Result<f64> {
        mean_accuracy(&self.sessions.iter().map(|s| s.joint).collect::<Vec<_>>())
    }

    pub fn last(&self) -> Option<&SessionMetrics> {
        self.sessions.last()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.sessions.is_empty() {
            Err(Error::State("report has no sessions".into()))
        } else {
            Ok(())
        }
    }

    /// Full-precision CSV; `NA` marks undefined values.
    pub fn to_csv(&self) -> Result<String> {
        self.ensure_nonempty()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in self.rows() {
            w.write_record([
                r.session.to_string(),
                r.joint.to_string(),
                r.base.to_string(),
                opt(r.novel),
                opt(r.harmonic),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text table with accuracies in percent.
    pub fn to_table(&self) -> Result<String> {
        self.ensure_nonempty()?;
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        writeln!(out, "variant: {}", self.variant).unwrap();
        writeln!(out, "{:>7} {:>8} {:>8} {:>8} {:>8}", "session", "joint", "base", "novel", "harmonic").unwrap();
        for r in self.rows() {
            writeln!(
                out,
                "{:>7} {:>8} {:>8} {:>8} {:>8}",
                r.session,
                pct(Some(r.joint)),
                pct(Some(r.base)),
                pct(r.novel),
                pct(r.harmonic)
            )
            .unwrap();
        }
        writeln!(out, "average joint accuracy: {:.2}", 100.0 * self.average_accuracy()?).unwrap();
        Ok(out)
    }
}

pub fn emit_report(report: &EvaluationReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Table => report.to_table()?,
    };
    fs::write(path, text)?;
    Ok(())
}

/// Read back a CSV written by [`emit_report`].
pub fn parse_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} value {:?}", CSV_HEADER[i], &record[i])))
        };
        let maybe = |i: usize| -> Result<Option<f64>> {
            if &record[i] == "NA" {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(ReportRow {
            session: record[0]
                .parse()
                .map_err(|_| parse_err(line, format!("bad session {:?}", &record[0])))?,
            joint: num(1)?,
            base: num(2)?,
            novel: maybe(3)?,
            harmonic: maybe(4)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::PrototypeSet;
    use crate::data::Split;
    use crate::numerics::Matrix;
    use crate::trainer::ModelConfig;
    use proptest::prelude::*;

    fn metrics(session: usize, joint: f64, base: f64, novel: Option<f64>) -> SessionMetrics {
        SessionMetrics {
            session,
            joint,
            base,
            novel,
            harmonic: novel.map(|n| harmonic_mean(base, n)),
            confusion: BTreeMap::new(),
        }
    }

    fn report() -> EvaluationReport {
        EvaluationReport {
            variant: "DDL".into(),
            sessions: vec![
                metrics(0, 0.9, 0.9, None),
                metrics(1, 0.8123456789012345, 0.85, Some(0.6)),
                metrics(2, 0.75, 0.8, Some(1.0 / 3.0)),
            ],
        }
    }

    #[test]
    fn harmonic_cases() {
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
        for x in (0..=1000).map(|i| i as f64 / 1000.0) {
            assert_eq!(harmonic_mean(x, x), x);
        }
        assert!((harmonic_mean(0.6, 0.4) - 0.48).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.0, 0.7), 0.0);
    }

    #[test]
    fn averages() {
        assert_eq!(mean_accuracy(&[0.7]).unwrap(), 0.7);
        assert_eq!(mean_accuracy(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(matches!(mean_accuracy(&[]), Err(Error::State(_))));
        assert!(matches!(EvaluationReport::new("x").average_accuracy(), Err(Error::State(_))));
    }

    #[test]
    fn table_one_row_mean() {
        // Nine published per-session accuracies; their arithmetic mean.
        let row = [77.23, 73.11, 69.11, 65.27, 62.39, 59.48, 57.62, 55.24, 52.20];
        let mean = mean_accuracy(&row).unwrap();
        let oracle: f64 = row.iter().sum::<f64>() / 9.0;
        assert_eq!(mean, oracle);
        assert!((mean - 63.516_666_666_666_67).abs() < 1e-9, "{mean}");
    }

    #[test]
    fn emit_guards_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let err = emit_report(&EvaluationReport::new("x"), &path, ReportFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert!(!path.exists());
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = report();
        emit_report(&r, &path, ReportFormat::Csv).unwrap();
        let first = fs::read(&path).unwrap();
        emit_report(&r, &path, ReportFormat::Csv).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(parse_report_csv(&path).unwrap(), r.rows());
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("session,joint,base,novel,harmonic\n0,0.9,0.9,NA,NA\n"));
    }

    #[test]
    fn table_layout() {
        let t = report().to_table().unwrap();
        assert!(t.starts_with("variant: DDL\n"));
        assert!(t.contains("      0    90.00    90.00        -        -"));
        assert!(t.contains("average joint accuracy: 82.08"));
    }

    #[test]
    fn bad_csv_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, "session,joint,base,novel,harmonic\n0,0.5,0.5,NA,NA\n1,zero,0.5,0.5,0.5\n").unwrap();
        assert!(matches!(parse_report_csv(&path), Err(Error::Parse { line: 3, .. })));
    }

    // Identity extractor, identity dictionary with a tiny ridge, one-hot
    // prototypes: every row is classified by its largest coordinate.
    fn toy_state() -> ModelState {
        let model = ModelConfig {
            hidden: vec![],
            feature_dim: 4,
            atoms: 4,
            lambda: 1e-6,
            tau: 0.1,
        };
        let mut state = ModelState::new(&model, 4, 0).unwrap();
        state.extractor =
            crate::backbone::FeatureExtractor::from_parameters(vec![Matrix::identity(4)], vec![Matrix::zeros(1, 4)])
                .unwrap()
                .frozen();
        state.dictionary = crate::dictionary::Dictionary::new(Matrix::identity(4), 1e-6).unwrap();
        let eye = Matrix::identity(4);
        state.sessions = vec![
            PrototypeSet::new(0, vec![0, 1], eye.select_rows(&[0, 1])).unwrap(),
            PrototypeSet::new(1, vec![2, 3], eye.select_rows(&[2, 3])).unwrap(),
        ];
        state
    }

    fn onehot_rows(classes: &[usize]) -> Matrix {
        Matrix::from_fn(classes.len(), 4, |i, j| if classes[i] == j { 1.0 } else { 0.05 })
    }

    #[test]
    fn perfect_predictions() {
        let state = toy_state();
        let test = SessionDataset::new(onehot_rows(&[0, 1, 2, 3, 3]), vec![0, 1, 2, 3, 3], Split::Test).unwrap();
        let m = evaluate_session(&state, &test, 1).unwrap();
        assert_eq!((m.joint, m.base, m.novel, m.harmonic), (1.0, 1.0, Some(1.0), Some(1.0)));
        assert_eq!(m.correct(), 5);
    }

    #[test]
    fn split_accuracy_and_confusion() {
        let state = toy_state();
        // rows point at 0, 2, 1, 3, 2 but are labelled 0, 1, 1, 3, 3
        let test = SessionDataset::new(onehot_rows(&[0, 2, 1, 3, 2]), vec![0, 1, 1, 3, 3], Split::Test).unwrap();
        let before = state.clone();
        let m = evaluate_session(&state, &test, 1).unwrap();
        assert_eq!(state, before);
        assert!((m.base - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.novel, Some(0.5));
        assert_eq!(m.joint, 0.6);
        assert_eq!(m.confusion[&(1, 2)], 1);
        assert_eq!(m.confusion[&(3, 2)], 1);
        assert_eq!(m.correct() as f64 / m.total() as f64, m.joint);
        assert!((m.harmonic.unwrap() - harmonic_mean(2.0 / 3.0, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn session_zero_has_no_novel_accuracy() {
        let state = toy_state();
        let test = SessionDataset::new(onehot_rows(&[0, 1]), vec![0, 1], Split::Test).unwrap();
        let m = evaluate_session(&state, &test, 0).unwrap();
        assert_eq!(m.novel, None);
        assert_eq!(m.harmonic, None);
    }

    #[test]
    fn unseen_test_label_is_rejected() {
        let state = toy_state();
        let test = SessionDataset::new(onehot_rows(&[2]), vec![2], Split::Test).unwrap();
        assert!(matches!(evaluate_session(&state, &test, 0), Err(Error::Config(_))));
        assert!(matches!(evaluate_session(&state, &test, 2), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn harmonic_bounds(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = harmonic_mean(a, b);
            prop_assert!(h <= 2.0 * a.min(b) + 1e-15);
            prop_assert!(h <= (a + b) / 2.0 + 1e-15);
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
