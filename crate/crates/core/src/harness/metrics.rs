use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::EvalResult;
use crate::selftrain::RoundReport;

/// One line of `metrics.csv`. Round 0 is the source-only model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub target_eval: Option<EvalResult>,
    pub selected: Vec<usize>,
    /// Empty for round 0, where no thresholds exist.
    pub lambda: Vec<f64>,
    pub mean_energy: f64,
    pub mean_neg_energy: Option<f64>,
    pub divergent_chains: usize,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn baseline(
        k: usize,
        target_eval: Option<EvalResult>,
        mean_energy: f64,
        seconds: f64,
    ) -> Self {
        Self {
            round: 0,
            target_eval,
            selected: vec![0; k],
            lambda: Vec::new(),
            mean_energy,
            mean_neg_energy: None,
            divergent_chains: 0,
            seconds,
        }
    }

    pub fn from_report(report: &RoundReport, record_timing: bool) -> Self {
        Self {
            round: report.round,
            target_eval: report.target_eval.clone(),
            selected: report.selected.clone(),
            lambda: report.thresholds.lambda.clone(),
            mean_energy: report.mean_target_energy,
            mean_neg_energy: report.mean_neg_energy,
            divergent_chains: report.divergent_chains,
            seconds: if record_timing { report.seconds } else { 0.0 },
        }
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        self.target_eval.as_ref().map(|e| e.mean_class_accuracy)
    }
}

pub fn header(k: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "mean_acc".to_string()];
    h.extend((0..k).map(|c| format!("acc_class_{c}")));
    h.extend((0..k).map(|c| format!("selected_{c}")));
    h.extend((0..k).map(|c| format!("lambda_{c}")));
    for name in [
        "mean_energy",
        "mean_neg_energy",
        "divergent_chains",
        "seconds",
    ] {
        h.push(name.to_string());
    }
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record(row: &MetricsRow, k: usize) -> Vec<String> {
    let mut r = vec![row.round.to_string(), opt(row.mean_accuracy())];
    for c in 0..k {
        r.push(opt(row
            .target_eval
            .as_ref()
            .map(|e| e.per_class_accuracy[c])));
    }
    r.extend(row.selected.iter().map(|s| s.to_string()));
    for c in 0..k {
        r.push(opt(row.lambda.get(c).copied()));
    }
    r.push(row.mean_energy.to_string());
    r.push(opt(row.mean_neg_energy));
    r.push(row.divergent_chains.to_string());
    r.push(row.seconds.to_string());
    r
}

/// Renders the rows as CSV. Floats use the shortest text that parses back
/// to the same value.
pub fn to_csv_string(rows: &[MetricsRow], k: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Validation(format!("metrics: {e}"));
    w.write_record(header(k)).map_err(err)?;
    for row in rows {
        if row.selected.len() != k {
            return Err(Error::Shape {
                expected: k,
                got: row.selected.len(),
            });
        }
        w.write_record(record(row, k)).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], k: usize) -> Result<()> {
    std::fs::write(path, to_csv_string(rows, k)?).map_err(|e| Error::io(path, e))
}
