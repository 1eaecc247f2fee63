//! Confusion matrices, macro-averaged scores and learning curves.
//!
//! Rows are ground truth over the configured classes; columns are the
//! configured classes plus a trailing Unknown column for off-schema or
//! unparsed predictions. Unknown predictions are wrong for accuracy, a false
//! negative for the true class and a false positive for no class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{ClassLabel, ClassSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("true label {0} is not a configured class")]
    UnknownTrueLabel(String),
    #[error("no scored outcomes")]
    EmptyMatrix,
    #[error("confusion matrices are over different class sets")]
    ClassSetMismatch,
    #[error("window must be at least 1")]
    ZeroWindow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: ClassSet,
    /// Row-major, `k` rows by `k + 1` columns.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &ClassSet) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes: classes.clone(),
            counts: vec![0; k * (k + 1)],
        }
    }

    /// Build from a `k x (k + 1)` grid of counts.
    pub fn from_counts(classes: &ClassSet, rows: &[Vec<u64>]) -> Self {
        let k = classes.len();
        assert_eq!(rows.len(), k, "one row per class");
        let mut cm = ConfusionMatrix::new(classes);
        for (r, row) in rows.iter().enumerate() {
            assert!(row.len() == k || row.len() == k + 1, "row {r} has {} columns", row.len());
            for (c, &n) in row.iter().enumerate() {
                cm.counts[r * (k + 1) + c] = n;
            }
        }
        cm
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn k(&self) -> usize {
        self.classes.len()
    }

    /// Count at (true row, predicted column); column `k` is Unknown.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * (self.k() + 1) + predicted]
    }

    pub fn unknown_column(&self) -> usize {
        self.k()
    }

    pub fn accumulate(&mut self, truth: &ClassLabel, predicted: &ClassLabel) -> Result<(), MetricsError> {
        let row = self
            .classes
            .index_of(truth)
            .ok_or_else(|| MetricsError::UnknownTrueLabel(truth.to_string()))?;
        let col = self.classes.index_of(predicted).unwrap_or(self.k());
        let k = self.k();
        self.counts[row * (k + 1) + col] += 1;
        Ok(())
    }

    /// Cell-wise addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::ClassSetMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        let k = self.k();
        self.counts[truth * (k + 1)..(truth + 1) * (k + 1)].iter().sum()
    }

    pub fn column_total(&self, predicted: usize) -> u64 {
        (0..self.k()).map(|r| self.get(r, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.get(i, i)).sum()
    }

    pub fn macro_metrics(&self) -> Result<MetricsReport, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let per_class: Vec<ClassMetrics> = (0..self.k())
            .map(|c| {
                let tp = self.get(c, c);
                let precision = ratio(tp, self.column_total(c));
                let support = self.row_total(c);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    class: self.classes.names()[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let k = self.k() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
        Ok(MetricsReport {
            accuracy: self.trace() as f64 / total as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            scored: total,
            unknown_predictions: self.column_total(self.k()),
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub scored: u64,
    pub unknown_predictions: u64,
    /// In class-set order.
    pub per_class: Vec<ClassMetrics>,
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    cm.macro_metrics()
}

// ---------------------------------------------------------------------------
// Learning curves

/// One scored step of a sequential run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredStep {
    pub truth: ClassLabel,
    pub predicted: ClassLabel,
    pub library_size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of outcomes consumed so far.
    pub sequence_end: u64,
    pub window_macro_f1: f64,
    pub cumulative_macro_f1: f64,
    pub library_size: u64,
}

/// One point per completed window of `window` outcomes, carrying both the
/// macro F1 of that window and of everything since the start. A trailing
/// partial window yields no point.
pub fn windowed_curve(classes: &ClassSet, steps: &[ScoredStep], window: usize) -> Result<Vec<CurvePoint>, MetricsError> {
    if window == 0 {
        return Err(MetricsError::ZeroWindow);
    }
    let mut cumulative = ConfusionMatrix::new(classes);
    let mut current = ConfusionMatrix::new(classes);
    let mut points = Vec::with_capacity(steps.len() / window);
    for (i, step) in steps.iter().enumerate() {
        cumulative.accumulate(&step.truth, &step.predicted)?;
        current.accumulate(&step.truth, &step.predicted)?;
        if (i + 1) % window == 0 {
            points.push(CurvePoint {
                sequence_end: (i + 1) as u64,
                window_macro_f1: current.macro_metrics()?.macro_f1,
                cumulative_macro_f1: cumulative.macro_metrics()?.macro_f1,
                library_size: step.library_size,
            });
            current = ConfusionMatrix::new(classes);
        }
    }
    Ok(points)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("sequence_end,window_macro_f1,cumulative_macro_f1,library_size\n");
    for p in points {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            p.sequence_end, p.window_macro_f1, p.cumulative_macro_f1, p.library_size
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Comparison tables

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.2}", x * 100.0)
}

/// Aligned text table of Accuracy / Precision / Recall / F1 (percent), one
/// row per method. With a baseline row index, a final row gives the last
/// method's improvement over that baseline.
pub fn render_comparison(rows: &[(String, MetricsReport)], baseline: Option<usize>) -> String {
    let header = ["Method", "Accuracy", "Precision", "Recall", "F1-Score"];
    let mut table: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, m)| {
            [
                name.clone(),
                pct(m.accuracy),
                pct(m.macro_precision),
                pct(m.macro_recall),
                pct(m.macro_f1),
            ]
        })
        .collect();
    if let (Some(b), Some((_, last))) = (baseline, rows.last()) {
        if b + 1 < rows.len() {
            let base = &rows[b].1;
            table.push([
                format!("Improvement (vs {})", rows[b].0),
                signed_pct(last.accuracy - base.accuracy),
                signed_pct(last.macro_precision - base.macro_precision),
                signed_pct(last.macro_recall - base.macro_recall),
                signed_pct(last.macro_f1 - base.macro_f1),
            ]);
        }
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("  {cell:>w$}"));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in &table {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}
