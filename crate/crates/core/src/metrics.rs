//! Session accuracies, summary statistics and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::protocol::TrainedState;

/// Accuracy of one session's evaluation over the union of test classes seen
/// so far. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_index: usize,
    pub acc_overall: f64,
    /// Accuracy on test samples of base-session classes.
    pub acc_base_classes: f64,
    /// Accuracy on test samples of incremental classes; `None` when there
    /// are none.
    pub acc_new_classes: Option<f64>,
    pub per_class_acc: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

/// Builds a report from `(true label, predicted label)` pairs.
pub fn tally(
    session_index: usize,
    outcomes: &[(usize, usize)],
    base_classes: &BTreeSet<usize>,
) -> Result<SessionReport> {
    if outcomes.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut hit, mut base_hit, mut base_n, mut new_hit, mut new_n) = (0, 0, 0, 0, 0);
    for &(truth, pred) in outcomes {
        let ok = usize::from(truth == pred);
        let e = per_class.entry(truth).or_default();
        e.0 += ok;
        e.1 += 1;
        hit += ok;
        if base_classes.contains(&truth) {
            base_hit += ok;
            base_n += 1;
        } else {
            new_hit += ok;
            new_n += 1;
        }
    }
    let frac = |h: usize, n: usize| h as f64 / n as f64;
    Ok(SessionReport {
        session_index,
        acc_overall: frac(hit, outcomes.len()),
        acc_base_classes: if base_n == 0 {
            0.0
        } else {
            frac(base_hit, base_n)
        },
        acc_new_classes: (new_n > 0).then(|| frac(new_hit, new_n)),
        per_class_acc: per_class
            .into_iter()
            .map(|(c, (h, n))| (c, frac(h, n)))
            .collect(),
        n_samples: outcomes.len(),
    })
}

/// Classifies every test sample with the state's extractor and classifier.
pub fn evaluate(
    state: &TrainedState,
    session_index: usize,
    test: &[LabeledSample],
) -> Result<SessionReport> {
    let mut outcomes = Vec::with_capacity(test.len());
    for s in test {
        if state.classifier.index_of(s.label).is_none() {
            return Err(Error::InvalidArgument(format!(
                "test label {} has no prototype",
                s.label
            )));
        }
        let f = state.extractor.extract_features(&s.input)?;
        outcomes.push((s.label, state.classifier.predict_label(&f)?));
    }
    tally(session_index, &outcomes, &state.base_classes)
}

/// Headline numbers for one run. `new`, `harmonic` are absent when the run
/// has no incremental session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// Overall accuracy after session 0.
    pub base: f64,
    /// Base-class accuracy after the last session.
    pub old: f64,
    /// Incremental-class accuracy after the last session.
    pub new: Option<f64>,
    /// Mean overall accuracy across sessions.
    pub avg: f64,
    /// `base - old`.
    pub pd: f64,
    pub harmonic: Option<f64>,
    /// Last overall accuracy.
    pub last: f64,
    /// Last overall accuracy minus a baseline's, when compared.
    pub final_improv: Option<f64>,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn summarize(reports: &[SessionReport]) -> Result<ExperimentSummary> {
    let (first, last) = match (reports.first(), reports.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Empty("session reports")),
    };
    let avg = reports.iter().map(|r| r.acc_overall).sum::<f64>() / reports.len() as f64;
    Ok(ExperimentSummary {
        base: first.acc_overall,
        old: last.acc_base_classes,
        new: last.acc_new_classes,
        avg,
        pd: first.acc_overall - last.acc_base_classes,
        harmonic: last
            .acc_new_classes
            .map(|n| harmonic_mean(last.acc_base_classes, n)),
        last: last.acc_overall,
        final_improv: None,
    })
}

pub fn final_improvement(ours_last: f64, baseline_last: f64) -> f64 {
    ours_last - baseline_last
}

/// One table row: a method under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub sessions: Vec<f64>,
    pub summary: ExperimentSummary,
}

impl ResultRow {
    pub fn new(method: impl Into<String>, seed: u64, reports: &[SessionReport]) -> Result<Self> {
        Ok(Self {
            method: method.into(),
            seed,
            sessions: reports.iter().map(|r| r.acc_overall).collect(),
            summary: summarize(reports)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Text => "txt",
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            _ => Err(Error::InvalidArgument(format!(
                "unknown table format {s:?}"
            ))),
        }
    }
}

fn session_count(rows: &[ResultRow]) -> Result<usize> {
    let n = rows.first().map_or(0, |r| r.sessions.len());
    for r in rows {
        if r.sessions.len() != n {
            return Err(Error::DimensionMismatch {
                context: "session columns",
                left: n,
                right: r.sessions.len(),
            });
        }
    }
    Ok(n)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn signed_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:+.2}", 100.0 * v))
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), pct)
}

fn opt_full(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

fn aligned(header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn row_json(r: &ResultRow) -> Value {
    json!({
        "sessions": r.sessions,
        "avg": r.summary.avg,
        "final_improv": r.summary.final_improv,
        "base": r.summary.base,
        "old": r.summary.old,
        "new": r.summary.new,
        "pd": r.summary.pd,
        "harmonic": r.summary.harmonic,
    })
}

fn nested_json(rows: &[ResultRow], leaf: impl Fn(&ResultRow) -> Value) -> Result<String> {
    let mut methods: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
    for r in rows {
        methods
            .entry(&r.method)
            .or_default()
            .insert(r.seed.to_string(), leaf(r));
    }
    let root: Map<String, Value> = methods
        .into_iter()
        .map(|(m, seeds)| (m.to_string(), Value::Object(seeds)))
        .collect();
    serde_json::to_string_pretty(&Value::Object(root))
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Per-session accuracy table. Text shows percentages to two decimals; csv
/// and json keep full-precision fractions.
pub fn emit_table(rows: &[ResultRow], format: TableFormat) -> Result<String> {
    let n = session_count(rows)?;
    match format {
        TableFormat::Text => {
            let mut header = vec!["Method".to_string(), "Seed".to_string()];
            header.extend((0..n).map(|t| t.to_string()));
            header.push("Avg Acc.".into());
            header.push("Final Improv.".into());
            let body = rows
                .iter()
                .map(|r| {
                    let mut cells = vec![r.method.clone(), r.seed.to_string()];
                    cells.extend(r.sessions.iter().map(|&v| pct(v)));
                    cells.push(pct(r.summary.avg));
                    cells.push(signed_pct(r.summary.final_improv));
                    cells
                })
                .collect();
            Ok(aligned(header, body))
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string(), "seed".to_string()];
            header.extend((0..n).map(|t| format!("session_{t}")));
            header.extend(
                [
                    "avg",
                    "final_improv",
                    "base",
                    "old",
                    "new",
                    "pd",
                    "harmonic",
                ]
                .map(String::from),
            );
            let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
            w.write_record(&header).map_err(csv_err)?;
            for r in rows {
                let s = &r.summary;
                let mut rec = vec![r.method.clone(), r.seed.to_string()];
                rec.extend(r.sessions.iter().map(|v| format!("{v:?}")));
                rec.push(format!("{:?}", s.avg));
                rec.push(opt_full(r.summary.final_improv));
                rec.push(format!("{:?}", s.base));
                rec.push(format!("{:?}", s.old));
                rec.push(opt_full(s.new));
                rec.push(format!("{:?}", s.pd));
                rec.push(opt_full(s.harmonic));
                w.write_record(&rec).map_err(csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
        }
        TableFormat::Json => nested_json(rows, row_json),
    }
}

/// Base / Old / New / Avg / PD / H per row.
pub fn emit_comparison(rows: &[ResultRow], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Text => {
            let header = ["Method", "Seed", "Base", "Old", "New", "Avg", "PD", "H"]
                .map(String::from)
                .to_vec();
            let body = rows
                .iter()
                .map(|r| {
                    let s = &r.summary;
                    vec![
                        r.method.clone(),
                        r.seed.to_string(),
                        pct(s.base),
                        pct(s.old),
                        opt_pct(s.new),
                        pct(s.avg),
                        pct(s.pd),
                        opt_pct(s.harmonic),
                    ]
                })
                .collect();
            Ok(aligned(header, body))
        }
        TableFormat::Csv => {
            let mut out = String::from("method,seed,base,old,new,avg,pd,harmonic\n");
            for r in rows {
                let s = &r.summary;
                let _ = writeln!(
                    out,
                    "{},{},{:?},{:?},{},{:?},{:?},{}",
                    r.method,
                    r.seed,
                    s.base,
                    s.old,
                    opt_full(s.new),
                    s.avg,
                    s.pd,
                    opt_full(s.harmonic)
                );
            }
            Ok(out)
        }
        TableFormat::Json => nested_json(rows, |r| {
            let s = &r.summary;
            json!({
                "base": s.base, "old": s.old, "new": s.new,
                "avg": s.avg, "pd": s.pd, "harmonic": s.harmonic,
            })
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(t: usize, overall: f64, base: f64, new: Option<f64>) -> SessionReport {
        SessionReport {
            session_index: t,
            acc_overall: overall,
            acc_base_classes: base,
            acc_new_classes: new,
            per_class_acc: BTreeMap::new(),
            n_samples: 1,
        }
    }

    #[test]
    fn tally_matches_hand_count() {
        let base: BTreeSet<usize> = [0, 1].into();
        let outcomes = [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0), (2, 1)];
        let r = tally(1, &outcomes, &base).unwrap();
        assert!((r.acc_overall - 3.0 / 6.0).abs() < 1e-15);
        assert!((r.acc_base_classes - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.acc_new_classes.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class_acc[&0], 0.5);
        assert_eq!(r.per_class_acc[&1], 1.0);
        assert!(tally(0, &[], &base).is_err());
        assert_eq!(tally(0, &[(0, 0)], &base).unwrap().acc_new_classes, None);
    }

    #[test]
    fn forgetting_and_harmonic() {
        let reports = [
            report(0, 0.7687, 0.7687, None),
            report(1, 0.70, 0.7115, Some(0.2065)),
        ];
        let s = summarize(&reports).unwrap();
        assert!((100.0 * s.pd - 5.72).abs() < 1e-9);
        assert!((s.pd + s.old - s.base).abs() < 1e-12);
        assert!((100.0 * s.harmonic.unwrap() - 32.01).abs() < 0.005);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn session_average_and_improvement() {
        let acc = [
            75.65, 70.45, 66.09, 62.16, 58.96, 55.92, 53.08, 51.05, 49.39,
        ];
        let reports: Vec<_> = acc
            .iter()
            .enumerate()
            .map(|(t, a)| report(t, a / 100.0, a / 100.0, None))
            .collect();
        let s = summarize(&reports).unwrap();
        assert!((100.0 * s.avg - 60.31).abs() < 0.005);
        assert!((100.0 * final_improvement(0.5641, 0.4939) - 7.02).abs() < 1e-9);
    }

    #[test]
    fn tables_render_and_reject_ragged_rows() {
        let reports = [report(0, 0.9, 0.9, None), report(1, 0.8, 0.85, Some(0.5))];
        let mut row = ResultRow::new("spl", 3, &reports).unwrap();
        row.summary.final_improv = Some(0.0702);
        let text = emit_table(std::slice::from_ref(&row), TableFormat::Text).unwrap();
        assert!(text.contains("85.00") && text.contains("+7.02"), "{text}");
        let csv = emit_table(std::slice::from_ref(&row), TableFormat::Csv).unwrap();
        assert!(csv.starts_with("method,seed,session_0,session_1,avg,final_improv"));
        assert!(csv.contains("spl,3,0.9,0.8,"));
        let json = emit_table(std::slice::from_ref(&row), TableFormat::Json).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["spl"]["3"]["sessions"][1], json!(0.8));
        let cmp = emit_comparison(std::slice::from_ref(&row), TableFormat::Text).unwrap();
        assert!(cmp.lines().next().unwrap().contains("PD"));

        let mut short = row.clone();
        short.sessions.pop();
        assert!(emit_table(&[row, short], TableFormat::Csv).is_err());
    }
}
