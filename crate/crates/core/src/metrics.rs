//! ROC / AUC and per-class evaluation of score reports.
//!
//! Anomalies are the positive class and larger scores rank as more
//! anomalous. Tied (positive, negative) pairs count one half.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::scores::{ScoreKind, ScoreReport};

pub const ALL_COLUMN: &str = "all";

/// `(score, is_anomaly)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScores {
    pub pairs: Vec<(f64, bool)>,
}

impl LabeledScores {
    pub fn new(pairs: Vec<(f64, bool)>) -> Self {
        Self { pairs }
    }

    pub fn from_sets(negatives: &[f64], positives: &[f64]) -> Self {
        let pairs = negatives
            .iter()
            .map(|s| (*s, false))
            .chain(positives.iter().map(|s| (*s, true)))
            .collect();
        Self { pairs }
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.pairs.iter().filter(|p| p.1).count();
        (pos, self.pairs.len() - pos)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::Metric(format!(
                "AUC needs at least one positive and one negative ({pos} positive, {neg} negative)"
            )));
        }
        if let Some((s, _)) = self.pairs.iter().find(|p| !p.0.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        Ok((pos, neg))
    }

    fn sorted(&self) -> Vec<(f64, bool)> {
        let mut v = self.pairs.clone();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Mann-Whitney AUC from midranks, `O(n log n)`.
pub fn auc_roc(scores: &LabeledScores) -> Result<f64> {
    let (pos, neg) = scores.check()?;
    let sorted = scores.sorted();
    // twice the positive rank sum; a tie group spanning 1-based ranks
    // i+1..=j has doubled midrank i+1+j
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let group_pos = sorted[i..j].iter().filter(|p| p.1).count() as u64;
        doubled_rank_sum += group_pos * (i + 1 + j) as u64;
        i = j;
    }
    let pos = pos as u64;
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg as u64) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Items with score ≥ threshold are called anomalous.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from `(0, 0)` (threshold `+∞`) through one point per distinct
/// score in decreasing order, ending at `(1, 1)`.
pub fn roc_curve(scores: &LabeledScores) -> Result<Vec<RocPoint>> {
    let (pos, neg) = scores.check()?;
    let mut sorted = scores.sorted();
    sorted.reverse();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// AUC matrix: rows are score variants, columns anomaly classes followed by
/// the pooled [`ALL_COLUMN`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normal_label: String,
    pub scores: Vec<ScoreKind>,
    pub columns: Vec<String>,
    pub runs: usize,
    /// `mean[score][column]`
    pub mean: Vec<Vec<f64>>,
    /// `per_run[run][score][column]`
    pub per_run: Vec<Vec<Vec<f64>>>,
    pub negatives: usize,
    /// Positives per column, in `columns` order.
    pub positives: Vec<usize>,
    #[serde(skip)]
    pub curves: Vec<Vec<Vec<Vec<RocPoint>>>>,
}

/// AUC of normals against each anomaly class and against all anomalies
/// pooled, for every score in every run. Multiple reports are treated as
/// repeated runs and averaged per cell.
pub fn evaluate(
    reports: &[ScoreReport],
    manifest: &DatasetManifest,
    normal_label: &str,
) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Evaluation("no score reports given".into()))?;
    let labels = manifest.labels();
    let scores = first.scores.clone();
    let mut columns: Option<Vec<String>> = None;
    let mut positives = Vec::new();
    let mut negatives = 0;
    let mut per_run = Vec::with_capacity(reports.len());
    let mut curves = Vec::with_capacity(reports.len());
    for (run, report) in reports.iter().enumerate() {
        let missing: Vec<&str> = report
            .rows
            .iter()
            .map(|r| r.image_id.as_str())
            .filter(|id| !labels.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Evaluation(format!(
                "run {}: {} scored image(s) missing from the manifest: {}",
                run + 1,
                missing.len(),
                missing.join(", ")
            )));
        }
        let row_label: Vec<&str> = report.rows.iter().map(|r| labels[r.image_id.as_str()]).collect();
        let classes: BTreeSet<&str> = row_label
            .iter()
            .copied()
            .filter(|l| *l != normal_label)
            .collect();
        let mut cols: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        cols.push(ALL_COLUMN.to_string());
        match &columns {
            None => columns = Some(cols.clone()),
            Some(c) if *c != cols => {
                return Err(Error::Evaluation(format!(
                    "run {} covers classes {cols:?}, run 1 covers {c:?}",
                    run + 1
                )))
            }
            _ => {}
        }
        let mut run_cells = Vec::with_capacity(scores.len());
        let mut run_curves = Vec::with_capacity(scores.len());
        for kind in &scores {
            let values = report.column(*kind).ok_or_else(|| {
                Error::Evaluation(format!("run {} has no {} column", run + 1, kind.column()))
            })?;
            let neg: Vec<f64> = values
                .iter()
                .zip(&row_label)
                .filter(|(_, l)| **l == normal_label)
                .map(|(v, _)| *v)
                .collect();
            negatives = neg.len();
            let mut cells = Vec::with_capacity(cols.len());
            let mut score_curves = Vec::with_capacity(cols.len());
            positives.clear();
            for col in &cols {
                let pos: Vec<f64> = values
                    .iter()
                    .zip(&row_label)
                    .filter(|(_, l)| **l != normal_label && (col == ALL_COLUMN || **l == col))
                    .map(|(v, _)| *v)
                    .collect();
                positives.push(pos.len());
                let ls = LabeledScores::from_sets(&neg, &pos);
                cells.push(auc_roc(&ls).map_err(|e| {
                    Error::Metric(format!("{} / {col}: {e}", kind.column()))
                })?);
                score_curves.push(roc_curve(&ls)?);
            }
            run_cells.push(cells);
            run_curves.push(score_curves);
        }
        per_run.push(run_cells);
        curves.push(run_curves);
    }
    let columns = columns.unwrap_or_default();
    let n = reports.len() as f64;
    let mean = (0..scores.len())
        .map(|s| {
            (0..columns.len())
                .map(|c| per_run.iter().map(|r| r[s][c]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(EvalReport {
        normal_label: normal_label.to_string(),
        scores,
        columns,
        runs: reports.len(),
        mean,
        per_run,
        negatives,
        positives,
        curves,
    })
}

#[derive(Serialize)]
struct EvalJson<'a> {
    note: String,
    normal_label: &'a str,
    runs: usize,
    columns: &'a [String],
    negatives: usize,
    positives: BTreeMap<&'a str, usize>,
    mean: BTreeMap<String, BTreeMap<&'a str, f64>>,
    per_run: Vec<BTreeMap<String, BTreeMap<&'a str, f64>>>,
}

impl EvalReport {
    pub fn cell(&self, score: ScoreKind, column: &str) -> Option<f64> {
        let s = self.scores.iter().position(|k| *k == score)?;
        let c = self.columns.iter().position(|k| k == column)?;
        Some(self.mean[s][c])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("score");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (kind, row) in self.scores.iter().zip(&self.mean) {
            out.push_str(&kind.column());
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    fn table(&self, cells: &[Vec<f64>]) -> BTreeMap<String, BTreeMap<&str, f64>> {
        self.scores
            .iter()
            .zip(cells)
            .map(|(k, row)| {
                let cols = self.columns.iter().map(String::as_str).zip(row.iter().copied());
                (k.column(), cols.collect())
            })
            .collect()
    }

    fn note(&self) -> String {
        match self.runs {
            1 => "single run".to_string(),
            n => format!("mean over {n} runs"),
        }
    }

    pub fn to_json(&self) -> String {
        let doc = EvalJson {
            note: self.note(),
            normal_label: &self.normal_label,
            runs: self.runs,
            columns: &self.columns,
            negatives: self.negatives,
            positives: self
                .columns
                .iter()
                .map(String::as_str)
                .zip(self.positives.iter().copied())
                .collect(),
            mean: self.table(&self.mean),
            per_run: self.per_run.iter().map(|r| self.table(r)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    /// Human-readable matrix with three decimals.
    pub fn to_text(&self) -> String {
        let width = self.columns.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{:16}", "score");
        for c in &self.columns {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (kind, row) in self.scores.iter().zip(&self.mean) {
            let _ = write!(out, "{:16}", kind.column());
            for v in row {
                let _ = write!(out, " {v:>width$.3}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{}", self.note());
        out
    }

    /// Write `eval.csv`, `eval.json` and `roc_<score>_<column>_run<r>.csv`
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.csv"), self.to_csv())?;
        std::fs::write(dir.join("eval.json"), self.to_json())?;
        for (r, run) in self.curves.iter().enumerate() {
            for (kind, per_col) in self.scores.iter().zip(run) {
                for (col, points) in self.columns.iter().zip(per_col) {
                    let name = format!("roc_{}_{}_run{}.csv", kind.name(), col, r + 1);
                    write_roc_csv(points, &dir.join(name))?;
                }
            }
        }
        Ok(())
    }
}
