//! Evaluation metrics and the per-domain report structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric to report per test domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "roc_auc")]
    RocAuc,
    #[serde(rename = "macro_f1")]
    MacroF1,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::RocAuc => "roc_auc",
            MetricKind::MacroF1 => "macro_f1",
        }
    }
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .zip(predicted)
        .filter(|(t, p)| t == p)
        .count();
    hits as f64 / truth.len() as f64
}

/// Area under the ROC curve for binary labels, from scores for class 1.
/// Computed as the Mann-Whitney statistic with midranks for ties.
pub fn roc_auc(truth: &[usize], scores: &[f64]) -> Result<f64> {
    assert_eq!(truth.len(), scores.len());
    if truth.iter().any(|&t| t > 1) {
        return Err(Error::MetricTaskMismatch {
            metric: "roc_auc".into(),
            reason: "labels must be binary".into(),
        });
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricTaskMismatch {
            metric: "roc_auc".into(),
            reason: "need both classes present".into(),
        });
    }
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // midrank over the tie block [i, j], 1-based ranks
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if truth[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Macro-averaged F1 over all `num_classes` classes; a class that is never
/// predicted (or never present) contributes 0.
pub fn macro_f1(truth: &[usize], predicted: &[usize], num_classes: usize) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = truth
            .iter()
            .zip(predicted)
            .filter(|(t, p)| **t == c && **p == c)
            .count() as f64;
        let fp = truth
            .iter()
            .zip(predicted)
            .filter(|(t, p)| **t != c && **p == c)
            .count() as f64;
        let fn_ = truth
            .iter()
            .zip(predicted)
            .filter(|(t, p)| **t == c && **p != c)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    f1_sum / num_classes as f64
}

/// Metric values for one trained model across test domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    /// (domain id, metric value), sorted by domain id.
    pub per_domain: Vec<(i64, f64)>,
    /// Worst-case domain.
    pub min: f64,
    /// Mean over domains.
    pub avg: f64,
}

impl SeedEval {
    pub fn new(seed: u64, per_domain: Vec<(i64, f64)>) -> Self {
        let min = per_domain
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        let avg = per_domain.iter().map(|(_, v)| *v).sum::<f64>() / per_domain.len().max(1) as f64;
        SeedEval {
            seed,
            per_domain,
            min,
            avg,
        }
    }
}

/// Aggregate over repeated training runs: per-domain means, worst-case and
/// average, plus the across-seed spread of the per-seed averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub seeds: Vec<SeedEval>,
    pub per_domain_mean: Vec<(i64, f64)>,
    pub min: f64,
    pub avg: f64,
    pub avg_mean: f64,
    pub avg_stddev: f64,
}

impl MetricReport {
    pub fn aggregate(metric: MetricKind, seeds: Vec<SeedEval>) -> Self {
        assert!(!seeds.is_empty());
        let domains: Vec<i64> = seeds[0].per_domain.iter().map(|(d, _)| *d).collect();
        let per_domain_mean: Vec<(i64, f64)> = domains
            .iter()
            .enumerate()
            .map(|(idx, &d)| {
                let mean = seeds.iter().map(|s| s.per_domain[idx].1).sum::<f64>()
                    / seeds.len() as f64;
                (d, mean)
            })
            .collect();
        let min = per_domain_mean
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        let avg = per_domain_mean.iter().map(|(_, v)| *v).sum::<f64>()
            / per_domain_mean.len().max(1) as f64;
        let avgs: Vec<f64> = seeds.iter().map(|s| s.avg).collect();
        let avg_mean = avgs.iter().sum::<f64>() / avgs.len() as f64;
        let avg_stddev = if avgs.len() > 1 {
            (avgs.iter().map(|a| (a - avg_mean).powi(2)).sum::<f64>() / (avgs.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        MetricReport {
            metric,
            seeds,
            per_domain_mean,
            min,
            avg,
            avg_mean,
            avg_stddev,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_scores_one() {
        let truth = vec![0, 1, 2, 1];
        assert_eq!(accuracy(&truth, &truth), 1.0);
        assert_eq!(macro_f1(&truth, &truth, 3), 1.0);
    }

    #[test]
    fn coin_flip_auc_is_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let truth: Vec<usize> = (0..n).map(|_| usize::from(rng.gen::<bool>())).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let auc = roc_auc(&truth, &scores).unwrap();
        assert!((auc - 0.5).abs() < 0.03, "{auc}");
    }

    #[test]
    fn auc_handles_ties_by_midrank() {
        // all scores equal: AUC must be exactly 0.5
        let truth = vec![0, 1, 0, 1];
        let scores = vec![0.7; 4];
        assert_eq!(roc_auc(&truth, &scores).unwrap(), 0.5);
    }

    #[test]
    fn auc_orders_separable_scores() {
        let truth = vec![0, 0, 1, 1];
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        assert_eq!(roc_auc(&truth, &scores).unwrap(), 1.0);
    }

    #[test]
    fn auc_rejects_multiclass() {
        assert!(roc_auc(&[0, 1, 2], &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn unpredicted_class_caps_macro_f1() {
        // two classes, class 1 never predicted
        let truth = vec![0, 0, 1, 1];
        let predicted = vec![0, 0, 0, 0];
        let f1_class0 = 2.0 * (0.5 * 1.0) / (0.5 + 1.0);
        let got = macro_f1(&truth, &predicted, 2);
        assert!((got - 0.5 * f1_class0).abs() < 1e-12);
        assert!(got <= 0.5 * (f1_class0 + 0.0) + 1e-12);
    }

    #[test]
    fn report_min_is_at_most_avg() {
        let seeds = vec![
            SeedEval::new(0, vec![(2, 0.8), (3, 0.6)]),
            SeedEval::new(1, vec![(2, 0.9), (3, 0.5)]),
        ];
        let report = MetricReport::aggregate(MetricKind::Accuracy, seeds);
        assert!(report.min <= report.avg);
        assert!((report.per_domain_mean[0].1 - 0.85).abs() < 1e-12);
        assert!((report.avg_mean - 0.7).abs() < 1e-12);
    }
}
