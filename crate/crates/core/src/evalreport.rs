//! Metrics and run reports.
//!
//! Reports carry the published reference scores as metadata next to the
//! numbers a run produced, so a desk-scale run is always read against them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::write_atomic;
use crate::error::{Error, Result};
use crate::manifest::ClassLabel;

pub const REGRESSION_BASELINE_RMSE: f64 = 2.9850;
pub const CLASSIFICATION_BASELINE_F1: f64 = 0.5500;

/// Published scores shown under each table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub dev: Option<f64>,
    pub test: f64,
}

fn reference(model: &str, dev: Option<f64>, test: f64) -> ReferenceRow {
    ReferenceRow {
        model: model.to_string(),
        dev,
        test,
    }
}

pub fn regression_references() -> Vec<ReferenceRow> {
    vec![
        reference("Text embedding regressor (published)", Some(2.4869), 2.6911),
        reference("Baseline (published)", None, REGRESSION_BASELINE_RMSE),
    ]
}

pub fn classification_references() -> Vec<ReferenceRow> {
    vec![
        reference("SVM, acoustic + readability (published)", Some(0.397), 0.5193),
        reference("Text classifier (published)", Some(0.51), 0.4876),
        reference("Ensemble 60/40 (published)", Some(0.61), 0.3998),
        reference("Baseline (published)", None, CLASSIFICATION_BASELINE_F1),
    ]
}

const REGRESSION_FOOTNOTE: &str =
    "The published test RMSE appears both as 2.26911 (running text) and 2.6911 (results table); the table value is listed.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportTask {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrediction {
    pub subject_id: String,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub subject_id: String,
    pub y_true: ClassLabel,
    pub y_pred: ClassLabel,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: ReportTask,
    pub model: String,
    /// `rmse` for regression, `macro_f1` for classification.
    pub metric: String,
    pub dev: f64,
    /// No held-out test split exists in a single-split run.
    pub test: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regression_predictions: Vec<RegressionPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_predictions: Vec<ClassPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_order: Vec<ClassLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class_f1: Vec<f64>,
}

impl EvaluationReport {
    pub fn regression(model: impl Into<String>, predictions: Vec<RegressionPrediction>) -> Result<Self> {
        let p: Vec<f64> = predictions.iter().map(|r| r.y_pred).collect();
        let y: Vec<f64> = predictions.iter().map(|r| r.y_true).collect();
        Ok(Self {
            task: ReportTask::Regression,
            model: model.into(),
            metric: "rmse".into(),
            dev: rmse(&p, &y)?,
            test: None,
            regression_predictions: predictions,
            class_predictions: Vec::new(),
            class_order: Vec::new(),
            confusion: None,
            per_class_f1: Vec::new(),
        })
    }

    pub fn classification(
        model: impl Into<String>,
        predictions: Vec<ClassPrediction>,
        class_order: &[ClassLabel],
    ) -> Result<Self> {
        let p: Vec<ClassLabel> = predictions.iter().map(|r| r.y_pred).collect();
        let y: Vec<ClassLabel> = predictions.iter().map(|r| r.y_true).collect();
        let cm = confusion_matrix(&p, &y, class_order)?;
        let per_class = per_class_f1(&cm);
        Ok(Self {
            task: ReportTask::Classification,
            model: model.into(),
            metric: "macro_f1".into(),
            dev: per_class.iter().sum::<f64>() / per_class.len() as f64,
            test: None,
            regression_predictions: Vec::new(),
            class_predictions: predictions,
            class_order: class_order.to_vec(),
            confusion: Some(cm),
            per_class_f1: per_class,
        })
    }
}

/// Root-mean-square error on the MMSE scale.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(crate::regressor::mse_loss(predictions, targets)?.sqrt())
}

/// `m[i][j]` counts subjects of true class `i` predicted as class `j`.
pub fn confusion_matrix(predicted: &[ClassLabel], truth: &[ClassLabel], order: &[ClassLabel]) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::arg(format!("{} predictions vs {} labels", predicted.len(), truth.len())));
    }
    if predicted.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    let index = |l: ClassLabel| {
        order
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::arg(format!("label {} is not in the class order", l.as_str())))
    };
    let mut m = vec![vec![0; order.len()]; order.len()];
    for (&p, &t) in predicted.iter().zip(truth) {
        m[index(t)?][index(p)?] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix; a class with no true and no
/// predicted members scores 0.
pub fn per_class_f1(m: &[Vec<usize>]) -> Vec<f64> {
    (0..m.len())
        .map(|c| {
            let tp = m[c][c] as f64;
            let actual: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|row| row[c]).sum();
            let denom = (actual + predicted) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

pub fn confusion_and_f1(
    predicted: &[ClassLabel],
    truth: &[ClassLabel],
    order: &[ClassLabel],
) -> Result<(Vec<Vec<usize>>, f64)> {
    let m = confusion_matrix(predicted, truth, order)?;
    let f1 = per_class_f1(&m);
    let macro_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
    Ok((m, macro_f1))
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    version: u32,
    reports: &'a [EvaluationReport],
    references: References,
}

#[derive(Debug, Serialize)]
struct References {
    regression: Vec<ReferenceRow>,
    classification: Vec<ReferenceRow>,
    notes: Vec<&'static str>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn table(out: &mut String, heading: &str, metric: &str, rows: &[&EvaluationReport], refs: &[ReferenceRow], footnote: Option<&str>) {
    let _ = writeln!(out, "## {heading}\n");
    let _ = writeln!(out, "| Model | Dev {metric} | Test {metric} |");
    let _ = writeln!(out, "|---|---|---|");
    for r in rows {
        let _ = writeln!(out, "| {} | {} | {} |", r.model, cell(Some(r.dev)), cell(r.test));
    }
    for r in refs {
        let mark = if footnote.is_some() && r.dev.is_some() { "[^1]" } else { "" };
        let _ = writeln!(out, "| {} | {} | {}{mark} |", r.model, cell(r.dev), cell(Some(r.test)));
    }
    if let Some(note) = footnote {
        let _ = writeln!(out, "\n[^1]: {note}");
    }
    out.push('\n');
}

fn confusion_block(out: &mut String, r: &EvaluationReport) {
    let Some(m) = &r.confusion else { return };
    let names: Vec<&str> = r.class_order.iter().map(|c| c.as_str()).collect();
    let _ = writeln!(out, "### Confusion matrix: {} (rows true, columns predicted)\n", r.model);
    let _ = writeln!(out, "| | {} |", names.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(names.len()));
    for (name, row) in names.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    }
    out.push('\n');
}

pub fn render_markdown(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("# Evaluation report\n\n");
    let regression: Vec<&EvaluationReport> = reports.iter().filter(|r| r.task == ReportTask::Regression).collect();
    let classification: Vec<&EvaluationReport> =
        reports.iter().filter(|r| r.task == ReportTask::Classification).collect();
    table(
        &mut out,
        "MMSE regression",
        "RMSE",
        &regression,
        &regression_references(),
        Some(REGRESSION_FOOTNOTE),
    );
    table(&mut out, "Diagnostic classification", "macro-F1", &classification, &classification_references(), None);
    for r in classification {
        confusion_block(&mut out, r);
    }
    out.push_str("Published rows are reference values on a private dataset, listed for comparison only.\n");
    out
}

pub fn render_json(reports: &[EvaluationReport]) -> Result<String> {
    let file = ReportFile {
        version: 1,
        reports,
        references: References {
            regression: regression_references(),
            classification: classification_references(),
            notes: vec![REGRESSION_FOOTNOTE],
        },
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Json {
        path: "report.json".into(),
        source: e,
    })?;
    s.push('\n');
    Ok(s)
}

/// Writes `report.json` and `report.md` into `out_dir`.
pub fn emit_report(reports: &[EvaluationReport], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join("report.json"), render_json(reports)?.as_bytes())?;
    write_atomic(&out_dir.join("report.md"), render_markdown(reports).as_bytes())
}
