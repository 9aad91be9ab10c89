//! Detection accuracy and average year error, and method comparison tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ReroofLabel;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub building_id: String,
    pub truth: ReroofLabel,
    pub prediction: ReroofLabel,
    /// Reroof presence predicted correctly (the year may still be wrong).
    pub detection_correct: bool,
    /// `|y_true − y_pred|`, only when both sides have a reroof year.
    pub abs_error_years: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub detection_accuracy: f32,
    /// Mean of `abs_error_years` over buildings where both truth and
    /// prediction are a reroof; `null` when there are none.
    pub avg_error_years: Option<f32>,
    pub n_buildings: usize,
    pub n_correct_detections: usize,
    pub n_reroof_correct: usize,
    pub records: Vec<BuildingRecord>,
}

/// Compares predictions with truths over the same building ids. Records are
/// ordered by building id.
pub fn evaluate(
    truths: &BTreeMap<String, ReroofLabel>,
    predictions: &BTreeMap<String, ReroofLabel>,
) -> Result<EvalReport> {
    let missing: Vec<&String> = truths.keys().filter(|k| !predictions.contains_key(*k)).collect();
    let extra: Vec<&String> = predictions.keys().filter(|k| !truths.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Dataset(format!(
            "building ids differ: no prediction for {missing:?}, no truth for {extra:?}"
        )));
    }
    if truths.is_empty() {
        return Err(Error::Precondition("nothing to evaluate".into()));
    }
    let records: Vec<BuildingRecord> = truths
        .iter()
        .map(|(id, &truth)| {
            let prediction = predictions[id];
            BuildingRecord {
                building_id: id.clone(),
                truth,
                prediction,
                detection_correct: truth.is_reroof() == prediction.is_reroof(),
                abs_error_years: match (truth, prediction) {
                    (ReroofLabel::ReroofYear(a), ReroofLabel::ReroofYear(b)) => Some(a.abs_diff(b)),
                    _ => None,
                },
            }
        })
        .collect();
    Ok(summarize(records))
}

/// Summary fields recomputed from per-building records.
pub fn summarize(records: Vec<BuildingRecord>) -> EvalReport {
    let n = records.len();
    let correct = records.iter().filter(|r| r.detection_correct).count();
    let errors: Vec<u32> = records.iter().filter_map(|r| r.abs_error_years).collect();
    let avg = (!errors.is_empty())
        .then(|| (errors.iter().map(|&e| e as f64).sum::<f64>() / errors.len() as f64) as f32);
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        detection_accuracy: (correct as f64 / n.max(1) as f64) as f32,
        avg_error_years: avg,
        n_buildings: n,
        n_correct_detections: correct,
        n_reroof_correct: errors.len(),
        records,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "{}: report schema {} (expected {REPORT_SCHEMA_VERSION})",
                path.display(),
                report.schema_version
            )));
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub detection_accuracy: f64,
    pub avg_error_years: Option<f64>,
    /// Published reference values rather than a run of this code.
    pub published: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Published test-set results for the learned pipeline and the categorical
/// baseline.
pub fn published_rows() -> Vec<ComparisonRow> {
    let row = |method: &str, acc: f64, err: f64| ComparisonRow {
        method: method.to_string(),
        detection_accuracy: acc,
        avg_error_years: Some(err),
        published: true,
    };
    vec![row("beta-VAE (published)", 0.872, 0.680), row("categorical (published)", 0.648, 1.868)]
}

pub fn compare_methods(reports: &[(&str, &EvalReport)], include_published: bool) -> ComparisonTable {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            method: name.to_string(),
            detection_accuracy: r.detection_accuracy as f64,
            avg_error_years: r.avg_error_years.map(f64::from),
            published: false,
        })
        .collect();
    if include_published {
        rows.extend(published_rows());
    }
    ComparisonTable { rows }
}

fn fmt_error(e: Option<f64>) -> String {
    e.map_or_else(|| "null".to_string(), |v| format!("{v:.3}"))
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,detection_accuracy,avg_error_years,published\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.3},{},{}\n",
                r.method,
                r.detection_accuracy,
                fmt_error(r.avg_error_years),
                r.published
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["method", "detection accuracy", "avg error (years)"];
        let body: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.method.clone(), format!("{:.3}", r.detection_accuracy), fmt_error(r.avg_error_years)])
            .collect();
        let mut width = header.map(str::len);
        for row in &body {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: [&str; 3]| {
            format!("{:<w0$}  {:>w1$}  {:>w2$}\n", cells[0], cells[1], cells[2], w0 = width[0], w1 = width[1], w2 = width[2])
        };
        let mut out = line(header);
        for row in &body {
            out.push_str(&line([&row[0], &row[1], &row[2]]));
        }
        out
    }
}
