//! Confusion matrices, precision/recall/F1 and report assembly.
//!
//! Any 0/0 ratio is 0. Macro averages are the unweighted mean over every
//! schema class, including classes that never occur. The pooled (micro)
//! figures are reported alongside.

use serde::{Deserialize, Serialize, Serializer};

use crate::data::LabelSchema;
use crate::error::{MtlError, Result};

/// `counts[g][p]` is the number of samples with gold `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(MtlError::contract("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion(golds: &[usize], preds: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(MtlError::contract(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if n_classes == 0 {
        return Err(MtlError::contract("n_classes must be positive"));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (i, (&g, &p)) in golds.iter().zip(preds).enumerate() {
        if g >= n_classes || p >= n_classes {
            return Err(MtlError::contract(format!(
                "sample {i}: class id ({g}, {p}) out of range for {n_classes} classes"
            )));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

fn round5<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((x * 1e5).round() / 1e5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    #[serde(serialize_with = "round5")]
    pub precision: f64,
    #[serde(serialize_with = "round5")]
    pub recall: f64,
    #[serde(serialize_with = "round5")]
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    #[serde(serialize_with = "round5")]
    pub precision: f64,
    #[serde(serialize_with = "round5")]
    pub recall: f64,
    #[serde(serialize_with = "round5")]
    pub f1: f64,
}

pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.n_classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let precision = ratio(tp, cm.col_sum(c) as f64);
            let recall = ratio(tp, cm.row_sum(c) as f64);
            ClassScores {
                precision,
                recall,
                f1: f1(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect()
}

pub fn macro_avg(scores: &[ClassScores]) -> Result<Averages> {
    if scores.is_empty() {
        return Err(MtlError::contract("macro average over zero classes"));
    }
    let n = scores.len() as f64;
    Ok(Averages {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}

pub fn weighted_avg(scores: &[ClassScores]) -> Result<Averages> {
    let total: u64 = scores.iter().map(|s| s.support).sum();
    if total == 0 {
        return Err(MtlError::contract("weighted average with zero total support"));
    }
    let t = total as f64;
    let w = |f: fn(&ClassScores) -> f64| scores.iter().map(|s| s.support as f64 * f(s)).sum::<f64>() / t;
    Ok(Averages {
        precision: w(|s| s.precision),
        recall: w(|s| s.recall),
        f1: w(|s| s.f1),
    })
}

/// Pooled ΣTP / Σ(TP+FP) and ΣTP / Σ(TP+FN).
pub fn micro_avg(cm: &ConfusionMatrix) -> Averages {
    let tp = cm.trace() as f64;
    let total = cm.total() as f64;
    let precision = ratio(tp, total);
    let recall = ratio(tp, total);
    Averages {
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    fn of_class(self, s: &ClassScores) -> f64 {
        match self {
            Metric::Precision => s.precision,
            Metric::Recall => s.recall,
            Metric::F1 => s.f1,
        }
    }

    fn of_avg(self, a: &Averages) -> f64 {
        match self {
            Metric::Precision => a.precision,
            Metric::Recall => a.recall,
            Metric::F1 => a.f1,
        }
    }
}

pub const MACRO_ROW: &str = "Macro-average";
pub const WEIGHTED_ROW: &str = "Weighted average";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassScores>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub micro: Averages,
    #[serde(serialize_with = "round5")]
    pub accuracy: f64,
    pub support: u64,
    pub confusion: ConfusionMatrix,
}

impl TaskReport {
    /// Class rows followed by the macro and weighted rows.
    pub fn rows(&self, metric: Metric) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .classes
            .iter()
            .zip(&self.per_class)
            .map(|(c, s)| (c.clone(), metric.of_class(s)))
            .collect();
        out.push((MACRO_ROW.to_string(), metric.of_avg(&self.macro_avg)));
        out.push((WEIGHTED_ROW.to_string(), metric.of_avg(&self.weighted)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskReport>,
}

impl MetricsReport {
    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Pretty JSON with scores rounded to five decimals.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MtlError::data(format!("bad report JSON: {e}")))
    }
}

pub fn task_report(golds: &[usize], preds: &[usize], schema: &LabelSchema) -> Result<TaskReport> {
    let cm = confusion(golds, preds, schema.len())?;
    let per_class = per_class_prf(&cm);
    Ok(TaskReport {
        task: schema.task.clone(),
        classes: schema.classes.clone(),
        macro_avg: macro_avg(&per_class)?,
        weighted: weighted_avg(&per_class)?,
        micro: micro_avg(&cm),
        accuracy: ratio(cm.trace() as f64, cm.total() as f64),
        support: cm.total(),
        per_class,
        confusion: cm,
    })
}

/// One `(golds, preds)` pair per schema, in schema order.
pub fn build_report(pairs: &[(Vec<usize>, Vec<usize>)], schemas: &[LabelSchema]) -> Result<MetricsReport> {
    if pairs.len() != schemas.len() {
        return Err(MtlError::contract(format!(
            "{} prediction sets for {} schemas",
            pairs.len(),
            schemas.len()
        )));
    }
    let tasks = pairs
        .iter()
        .zip(schemas)
        .map(|((g, p), s)| task_report(g, p, s))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { tasks })
}
