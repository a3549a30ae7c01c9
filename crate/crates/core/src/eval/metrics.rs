use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::TaskKind;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::invalid("confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fn, fp, tn)` treating `class` as positive.
    pub fn one_vs_all(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let row: u64 = self.counts[class].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[class]).sum();
        let fne = row - tp;
        let fp = col - tp;
        (tp, fne, fp, self.total() - tp - fne - fp)
    }
}

pub fn confusion(true_labels: &[usize], predicted: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::invalid("label sequences differ in length"));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::invalid(format!("label code {} out of range 0..{n_classes}", t.max(p))));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    /// Quantities whose denominator was zero and were set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "accuracy" => self.accuracy,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "precision" => self.precision,
            "f1" => self.f1,
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 5] = ["accuracy", "sensitivity", "specificity", "precision", "f1"];

    fn from_values(v: [f64; 5], degenerate: Vec<String>) -> Self {
        Self {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            precision: v[3],
            f1: v[4],
            degenerate,
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.precision, self.f1]
    }
}

fn ratio(num: f64, den: f64, what: String, flags: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        flags.push(what);
        0.0
    } else {
        num / den
    }
}

/// Per-class `[sensitivity, specificity, precision, f1]`.
fn class_stats(cm: &ConfusionMatrix, class: usize, flags: &mut Vec<String>) -> [f64; 4] {
    let (tp, fne, fp, tn) = cm.one_vs_all(class);
    let (tp, fne, fp, tn) = (tp as f64, fne as f64, fp as f64, tn as f64);
    let s = ratio(tp, tp + fne, format!("sensitivity[{class}]"), flags);
    let sp = ratio(tn, tn + fp, format!("specificity[{class}]"), flags);
    let p = ratio(tp, tp + fp, format!("precision[{class}]"), flags);
    let f1 = ratio(2.0 * p * s, p + s, format!("f1[{class}]"), flags);
    [s, sp, p, f1]
}

/// Binary metrics treat class 0 (Mpox) as positive; multiclass metrics are
/// one-vs-all per class, macro averaged.
pub fn compute_metrics(cm: &ConfusionMatrix, task: TaskKind) -> Result<MetricSet> {
    if cm.n_classes() != task.n_classes() {
        return Err(Error::invalid(format!(
            "{}x{} matrix for a {}-class task",
            cm.n_classes(),
            cm.n_classes(),
            task.n_classes()
        )));
    }
    let n = cm.total();
    if n == 0 {
        return Err(Error::invalid("metrics of an empty confusion matrix"));
    }
    let mut flags = Vec::new();
    let accuracy = cm.trace() as f64 / n as f64;
    let [s, sp, p, f1] = match task {
        TaskKind::Binary => class_stats(cm, 0, &mut flags),
        TaskKind::Multiclass => {
            let mut acc = [0.0; 4];
            let k = cm.n_classes();
            for c in 0..k {
                let v = class_stats(cm, c, &mut flags);
                for i in 0..4 {
                    acc[i] += v[i];
                }
            }
            acc.map(|v| v / k as f64)
        }
    };
    Ok(MetricSet::from_values([accuracy, s, sp, p, f1], flags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricSet,
    /// Sample standard deviation; zero for a single fold.
    pub std: MetricSet,
    pub single_fold: bool,
}

pub fn aggregate(per_fold: &[MetricSet]) -> Result<Aggregate> {
    if per_fold.is_empty() {
        return Err(Error::invalid("no folds to aggregate"));
    }
    let n = per_fold.len() as f64;
    let mut mean = [0.0; 5];
    for m in per_fold {
        for (a, v) in mean.iter_mut().zip(m.values()) {
            *a += v / n;
        }
    }
    let mut std = [0.0; 5];
    if per_fold.len() > 1 {
        for m in per_fold {
            for ((s, v), mu) in std.iter_mut().zip(m.values()).zip(mean) {
                *s += (v - mu).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    let flags: Vec<String> = per_fold
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.degenerate.iter().map(move |d| format!("fold {i}: {d}")))
        .collect();
    Ok(Aggregate {
        mean: MetricSet::from_values(mean, flags),
        std: MetricSet::from_values(std, Vec::new()),
        single_fold: per_fold.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_hand_example() {
        let cm = confusion(&[0, 0, 0, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, [[2, 1], [0, 1]]);
        let cm = ConfusionMatrix {
            counts: vec![vec![8, 2], vec![1, 9]],
        };
        let m = compute_metrics(&cm, TaskKind::Binary).unwrap();
        assert!((m.accuracy - 0.85).abs() < 1e-15);
        assert!((m.sensitivity - 0.8).abs() < 1e-15);
        assert!((m.specificity - 0.9).abs() < 1e-15);
        assert!((m.precision - 8.0 / 9.0).abs() < 1e-15);
        assert!((m.f1 - 0.842_105_263_157_894_7).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = confusion(&[0, 1, 2, 3, 3], &[0, 1, 2, 3, 3], 4).unwrap();
        let m = compute_metrics(&cm, TaskKind::Multiclass).unwrap();
        for name in MetricSet::NAMES {
            assert_eq!(m.get(name), Some(1.0));
        }
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        let cm = confusion(&[0, 1, 2, 3], &[0, 1, 2, 2], 4).unwrap();
        let m = compute_metrics(&cm, TaskKind::Multiclass).unwrap();
        assert!(m.degenerate.iter().any(|d| d == "precision[3]"));
        assert!(m.precision.is_finite());
    }

    #[test]
    fn empty_and_out_of_range() {
        assert_eq!(confusion(&[], &[], 2).unwrap().total(), 0);
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(compute_metrics(&ConfusionMatrix::zeros(2), TaskKind::Binary).is_err());
    }

    #[test]
    fn aggregation() {
        let fold = |a| MetricSet::from_values([a, 0.5, 0.5, 0.5, 0.5], Vec::new());
        let agg = aggregate(&[fold(0.9), fold(1.0)]).unwrap();
        assert!((agg.mean.accuracy - 0.95).abs() < 1e-15);
        assert!((agg.std.accuracy - 0.070_710_678_118_654_75).abs() < 1e-12);
        assert_eq!(agg.std.f1, 0.0);
        let one = aggregate(&[fold(0.7)]).unwrap();
        assert!(one.single_fold);
        assert_eq!(one.std.accuracy, 0.0);
        assert!(aggregate(&[]).is_err());
    }
}
