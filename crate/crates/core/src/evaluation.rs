//! Eloquent-class accuracy, overall accuracy and eloquent-vs-rest AUC, per
//! patient and averaged over patients and folds.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{CLASSES, ELOQUENT};
use serde::{Deserialize, Serialize};

const K: usize = CLASSES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Recall on truth-eloquent nodes; `None` when there are none.
    pub eloquent_accuracy: Option<f64>,
    pub overall_accuracy: f64,
    /// Eloquent vs rest; `None` when one side is empty.
    pub auc: Option<f64>,
    /// `confusion[truth][predicted]`
    pub confusion: [[usize; K]; K],
}

/// Class id per row of a one-hot matrix.
pub fn one_hot_classes(truth: &Tensor) -> Result<Vec<usize>> {
    if truth.rank() != 2 || truth.cols() != K {
        return Err(Error::dim("truth labels", truth.shape(), &[0, K]));
    }
    (0..truth.rows())
        .map(|i| {
            let row = truth.row(i);
            let hot: Vec<usize> = (0..K).filter(|&c| row[c] == 1.0).collect();
            if hot.len() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0) {
                Ok(hot[0])
            } else {
                Err(Error::Label(format!("row {i} is not one-hot")))
            }
        })
        .collect()
}

pub fn compute_metrics(predicted: &[usize], scores: &Tensor, truth: &Tensor) -> Result<TaskMetrics> {
    let n = predicted.len();
    if n == 0 {
        return Err(Error::Empty("no nodes to evaluate"));
    }
    if scores.shape() != [n, K] {
        return Err(Error::dim("metric scores", scores.shape(), &[n, K]));
    }
    let truth = one_hot_classes(truth)?;
    if truth.len() != n {
        return Err(Error::dim("truth labels", &[truth.len()], &[n]));
    }
    let mut confusion = [[0; K]; K];
    for (&t, &p) in truth.iter().zip(predicted) {
        if p >= K {
            return Err(Error::Label(format!("predicted class {p} out of range")));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..K).map(|c| confusion[c][c]).sum();
    let eloquent: usize = confusion[ELOQUENT].iter().sum();
    let eloquent_accuracy = (eloquent > 0).then(|| confusion[ELOQUENT][ELOQUENT] as f64 / eloquent as f64);
    let ranking: Vec<f64> = (0..n).map(|i| scores.at(i, ELOQUENT)).collect();
    let positive: Vec<bool> = truth.iter().map(|&c| c == ELOQUENT).collect();
    Ok(TaskMetrics {
        eloquent_accuracy,
        overall_accuracy: correct as f64 / n as f64,
        auc: auc(&ranking, &positive),
        confusion,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney U with average ranks).
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// One-based ranks with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = mean;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of the defined values and how many there were.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        (None, 0)
    } else {
        (Some(mean(&defined)), defined.len())
    }
}

/// Metric means, each over the items where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub eloquent_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub counts: SummaryCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryCounts {
    pub eloquent_accuracy: usize,
    pub overall_accuracy: usize,
    pub auc: usize,
}

impl Summary {
    fn from_parts(parts: [(Option<f64>, usize); 3]) -> Option<Self> {
        let [(e, ne), (o, no), (a, na)] = parts;
        (no > 0).then_some(Summary {
            eloquent_accuracy: e,
            overall_accuracy: o,
            auc: a,
            counts: SummaryCounts {
                eloquent_accuracy: ne,
                overall_accuracy: no,
                auc: na,
            },
        })
    }
}

/// Equal-weight average over patients; `None` for no patients.
pub fn summarize(patients: &[TaskMetrics]) -> Option<Summary> {
    Summary::from_parts([
        mean_defined(patients.iter().map(|m| m.eloquent_accuracy)),
        mean_defined(patients.iter().map(|m| Some(m.overall_accuracy))),
        mean_defined(patients.iter().map(|m| m.auc)),
    ])
}

/// Mean over folds where each metric is defined; `None` when no fold
/// evaluated the task at all.
pub fn aggregate_cv(folds: &[Option<Summary>]) -> Option<Summary> {
    let defined: Vec<&Summary> = folds.iter().flatten().collect();
    Summary::from_parts([
        mean_defined(defined.iter().map(|s| s.eloquent_accuracy)),
        mean_defined(defined.iter().map(|s| s.overall_accuracy)),
        mean_defined(defined.iter().map(|s| s.auc)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(classes: &[usize]) -> Tensor {
        let mut y = Tensor::zeros(&[classes.len(), 3]);
        for (i, &c) in classes.iter().enumerate() {
            y.set(i, c, 1.0);
        }
        y
    }

    #[test]
    fn auc_of_four_nodes() {
        let a = auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[3.0, 2.0, 1.0], &[true, false, false]), Some(1.0));
        assert_eq!(auc(&[1.0; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(auc(&[1.0, 2.0], &[false, false]), None);
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn metrics_from_confusion() {
        let truth = one_hot(&[0, 0, 1, 2, 2]);
        let scores = Tensor::matrix(5, 3, vec![
            0.9, 0.0, 0.0, 0.1, 0.0, 0.5, 0.0, 1.0, 0.0, 0.3, 0.0, 0.2, 0.0, 0.0, 1.0,
        ])
        .unwrap();
        let m = compute_metrics(&[0, 2, 1, 0, 2], &scores, &truth).unwrap();
        assert_eq!(m.eloquent_accuracy, Some(0.5));
        assert_eq!(m.overall_accuracy, 3.0 / 5.0);
        let trace: usize = (0..3).map(|c| m.confusion[c][c]).sum();
        assert_eq!(trace as f64 / 5.0, m.overall_accuracy);
        assert_eq!(m.confusion[0].iter().sum::<usize>(), 2);
        assert_eq!(m.auc, auc(&[0.9, 0.1, 0.0, 0.3, 0.0], &[true, true, false, false, false]));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            compute_metrics(&[], &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn undefined_fold_is_skipped() {
        let fold = |auc| {
            Some(Summary {
                eloquent_accuracy: Some(0.8),
                overall_accuracy: Some(0.9),
                auc,
                counts: SummaryCounts {
                    eloquent_accuracy: 2,
                    overall_accuracy: 2,
                    auc: 2,
                },
            })
        };
        let mut folds = vec![fold(Some(0.7)); 7];
        folds.push(fold(None));
        let s = aggregate_cv(&folds).unwrap();
        assert_eq!(s.counts.auc, 7);
        assert_eq!(s.counts.overall_accuracy, 8);
        assert!((s.auc.unwrap() - 0.7).abs() < 1e-15);
        assert!((s.eloquent_accuracy.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(aggregate_cv(&[None, None]), None);
    }

    #[test]
    fn spearman_of_monotone_pair() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &[10.0, 20.0, 25.0, 100.0]), Some(1.0));
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&a, &[1.0; 4]), None);
    }
}
