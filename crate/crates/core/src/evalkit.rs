//! Probability-matrix fusion and balanced-accuracy scoring.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::manifest::{
    csv_rows, expect_header, ClassLabel, DatasetManifest, ManifestError, NUM_CLASSES, ONE_HOT_HEADER,
};

/// Rows whose sum is within this of 1 are stored as-is.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Smallest row sum accepted for renormalization.
pub const MIN_ROW_SUM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Format(#[from] ManifestError),
    #[error("malformed number `{value}`, row {row}")]
    BadNumber { row: u64, value: String },
    #[error("negative probability {value}, row {row}")]
    Negative { row: u64, value: f64 },
    #[error("all-zero probability row, row {row}")]
    ZeroRow { row: u64 },
    #[error("duplicate image id `{id}`, row {row}")]
    DuplicateId { row: u64, id: String },
    #[error("expected {expected} weights for {expected} models, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error("weights must be finite and non-negative with at least one positive")]
    BadWeights,
    #[error("no prediction matrices to fuse")]
    NoMatrices,
    #[error("image id sets differ between models (first difference: `{0}`)")]
    IdMismatch(String),
    #[error("prediction for unknown image id `{0}`")]
    UnknownId(String),
    #[error("confusion matrix is empty")]
    EmptyConfusion,
}

/// Per-image class probabilities, sorted by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbabilityMatrix {
    rows: Vec<(String, [f64; NUM_CLASSES])>,
}

impl ProbabilityMatrix {
    /// Sorts rows by id; ids must be unique and rows already valid.
    pub fn from_rows(mut rows: Vec<(String, [f64; NUM_CLASSES])>) -> Result<Self, EvalError> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(EvalError::DuplicateId { row: 0, id: w[0].0.clone() });
        }
        Ok(ProbabilityMatrix { rows })
    }

    pub fn rows(&self) -> &[(String, [f64; NUM_CLASSES])] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `image,MEL,...,VASC` CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = ONE_HOT_HEADER.join(",");
        out.push('\n');
        for (id, p) in &self.rows {
            out.push_str(id);
            for v in p {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a probability CSV, renormalizing rows whose sum is off by more
/// than [`ROW_SUM_TOLERANCE`].
pub fn load_probabilities(csv_text: &str) -> Result<ProbabilityMatrix, EvalError> {
    let mut rows = csv_rows(csv_text);
    expect_header(&mut rows, &ONE_HOT_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rows {
        let (row, rec) = rec.map_err(ManifestError::from)?;
        if rec.len() != ONE_HOT_HEADER.len() {
            return Err(ManifestError::ColumnCount { row, expected: ONE_HOT_HEADER.len(), found: rec.len() }.into());
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(ManifestError::EmptyId { row }.into());
        }
        let mut p = [0.0; NUM_CLASSES];
        for (slot, cell) in p.iter_mut().zip(rec.iter().skip(1)) {
            let v: f64 = cell
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| EvalError::BadNumber { row, value: cell.to_string() })?;
            if v < 0.0 {
                return Err(EvalError::Negative { row, value: v });
            }
            *slot = v;
        }
        let sum: f64 = p.iter().sum();
        if sum < MIN_ROW_SUM {
            return Err(EvalError::ZeroRow { row });
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            for v in &mut p {
                *v /= sum;
            }
        }
        if !seen.insert(id.clone()) {
            return Err(EvalError::DuplicateId { row, id });
        }
        out.push((id, p));
    }
    ProbabilityMatrix::from_rows(out)
}

/// Per-model fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    weights: Vec<f64>,
}

impl EnsembleConfig {
    pub fn new(weights: Vec<f64>) -> Result<Self, EvalError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !weights.iter().any(|w| *w > 0.0) {
            return Err(EvalError::BadWeights);
        }
        Ok(EnsembleConfig { weights })
    }

    /// Equal weights of 0.5 for `n` models.
    pub fn halves(n: usize) -> Self {
        EnsembleConfig { weights: vec![0.5; n] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check_compatible(matrices: &[ProbabilityMatrix], cfg: &EnsembleConfig) -> Result<(), EvalError> {
    let first = matrices.first().ok_or(EvalError::NoMatrices)?;
    if cfg.weights.len() != matrices.len() {
        return Err(EvalError::WeightCount { expected: matrices.len(), found: cfg.weights.len() });
    }
    for m in &matrices[1..] {
        let a = first.rows.iter().map(|r| &r.0);
        let b = m.rows.iter().map(|r| &r.0);
        if let Some(id) = first_difference(a, b) {
            return Err(EvalError::IdMismatch(id));
        }
    }
    Ok(())
}

/// First id (in sorted order) present in one sorted sequence but not the other.
fn first_difference<'a>(
    mut a: impl Iterator<Item = &'a String>,
    mut b: impl Iterator<Item = &'a String>,
) -> Option<String> {
    loop {
        match (a.next(), b.next()) {
            (None, None) => return None,
            (Some(x), None) | (None, Some(x)) => return Some(x.clone()),
            (Some(x), Some(y)) if x != y => return Some(x.min(y).clone()),
            _ => {}
        }
    }
}

/// Weighted average of probability rows: `sum_m w_m p_m / sum_m w_m`.
pub fn fuse(matrices: &[ProbabilityMatrix], cfg: &EnsembleConfig) -> Result<ProbabilityMatrix, EvalError> {
    check_compatible(matrices, cfg)?;
    let total: f64 = cfg.weights.iter().sum();
    let rows = (0..matrices[0].len())
        .map(|r| {
            let mut p = [0.0; NUM_CLASSES];
            for (m, w) in matrices.iter().zip(&cfg.weights) {
                for (acc, v) in p.iter_mut().zip(&m.rows[r].1) {
                    *acc += w * v;
                }
            }
            (matrices[0].rows[r].0.clone(), p.map(|v| v / total))
        })
        .collect();
    Ok(ProbabilityMatrix { rows })
}

/// Weighted majority vote: each model's argmax class receives its weight;
/// rows are the resulting vote shares.
pub fn vote(matrices: &[ProbabilityMatrix], cfg: &EnsembleConfig) -> Result<ProbabilityMatrix, EvalError> {
    check_compatible(matrices, cfg)?;
    let total: f64 = cfg.weights.iter().sum();
    let rows = (0..matrices[0].len())
        .map(|r| {
            let mut p = [0.0; NUM_CLASSES];
            for (m, w) in matrices.iter().zip(&cfg.weights) {
                p[argmax(&m.rows[r].1).index()] += w;
            }
            (matrices[0].rows[r].0.clone(), p.map(|v| v / total))
        })
        .collect();
    Ok(ProbabilityMatrix { rows })
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax(p: &[f64; NUM_CLASSES]) -> ClassLabel {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    ClassLabel::ALL[best]
}

pub fn predict(m: &ProbabilityMatrix) -> Vec<(String, ClassLabel)> {
    m.rows.iter().map(|(id, p)| (id.clone(), argmax(p))).collect()
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, truth: ClassLabel) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    /// Recall for `truth`, or `None` if it has no samples.
    pub fn recall(&self, truth: ClassLabel) -> Option<f64> {
        let n = self.row_total(truth);
        (n > 0).then(|| self.counts[truth.index()][truth.index()] as f64 / n as f64)
    }
}

pub fn confusion(pred: &[(String, ClassLabel)], truth: &DatasetManifest) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for (id, p) in pred {
        let t = truth.get(id).ok_or_else(|| EvalError::UnknownId(id.clone()))?;
        cm.counts[t.label.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Mean recall over the classes that have at least one true sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let recalls: Vec<f64> = ClassLabel::ALL.iter().filter_map(|&c| cm.recall(c)).collect();
    if recalls.is_empty() {
        return Err(EvalError::EmptyConfusion);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// `None` for classes absent from the ground truth.
    pub per_class_recall: [Option<f64>; NUM_CLASSES],
    pub balanced_accuracy: f64,
    pub overall_accuracy: f64,
    pub evaluated: u64,
    pub confusion: ConfusionMatrix,
}

impl EvaluationReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self, EvalError> {
        let balanced_accuracy = balanced_accuracy(&cm)?;
        let correct: u64 = (0..NUM_CLASSES).map(|i| cm.counts[i][i]).sum();
        Ok(EvaluationReport {
            per_class_recall: ClassLabel::ALL.map(|c| cm.recall(c)),
            balanced_accuracy,
            overall_accuracy: correct as f64 / cm.total() as f64,
            evaluated: cm.total(),
            confusion: cm,
        })
    }

    pub fn absent_classes(&self) -> Vec<ClassLabel> {
        ClassLabel::ALL.into_iter().filter(|c| self.per_class_recall[c.index()].is_none()).collect()
    }

    /// `metric,value` CSV.
    pub fn metrics_csv(&self) -> String {
        format!(
            "metric,value\nbalanced_accuracy,{}\noverall_accuracy,{}\nevaluated,{}\nclasses_present,{}\n",
            self.balanced_accuracy,
            self.overall_accuracy,
            self.evaluated,
            NUM_CLASSES - self.absent_classes().len()
        )
    }

    /// `class,recall` CSV; absent classes are written as `NA`.
    pub fn recall_csv(&self) -> String {
        let mut out = String::from("class,recall\n");
        for c in ClassLabel::ALL {
            match self.per_class_recall[c.index()] {
                Some(r) => writeln!(out, "{c},{r}").unwrap(),
                None => writeln!(out, "{c},NA").unwrap(),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8}{:>10}{:>8}", "class", "recall", "n").unwrap();
        for c in ClassLabel::ALL {
            let n = self.confusion.row_total(c);
            match self.per_class_recall[c.index()] {
                Some(r) => writeln!(out, "{:<8}{:>10.4}{:>8}", c.code(), r, n).unwrap(),
                None => writeln!(out, "{:<8}{:>10}{:>8}", c.code(), "absent", n).unwrap(),
            }
        }
        writeln!(out, "balanced accuracy  {:.4}", self.balanced_accuracy).unwrap();
        writeln!(out, "overall accuracy   {:.4}", self.overall_accuracy).unwrap();
        let absent = self.absent_classes();
        if !absent.is_empty() {
            let names: Vec<&str> = absent.iter().map(|c| c.code()).collect();
            writeln!(out, "note: excluded from balanced accuracy (no true samples): {}", names.join(", ")).unwrap();
        }
        out
    }
}
