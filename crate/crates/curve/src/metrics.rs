//! Classification and topology metrics with exact rank-based AUC.

use serde::{Deserialize, Serialize};

/// Fraction of correct predictions; 0 on an empty set.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / pred.len() as f64
}

/// Rank-based ROC AUC for binary labels from real-valued scores (higher
/// means more positive). Tied scores share the average rank. Returns 0.5
/// when one class is absent.
pub fn auc(scores: &[f64], labels: &[usize]) -> f64 {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group [i, j].
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&k| labels[k] == 1).map(|k| ranks[k]).sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(pred: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fne) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fne += 1.0,
            _ => {}
        }
    }
    let denom = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fne) / denom
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Aggregate evaluation report for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub acc: f64,
    pub auc: f64,
    pub mcc: f64,
    /// Mean over frames of (retained edges / nodes).
    pub avg_degree: f64,
    pub avg_edges_per_frame: f64,
    pub std_edges_per_frame: f64,
    /// Mean predicted uncertainty over correct predictions; null if none.
    pub u_cor_mean: Option<f64>,
    /// Mean predicted uncertainty over wrong predictions; null if none.
    pub u_wro_mean: Option<f64>,
    pub class_counts: [usize; 2],
}

/// Per-sequence evaluation record feeding the aggregate report.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    pub label: usize,
    pub pred: usize,
    /// Score for the positive class (logit difference).
    pub score: f64,
    /// Mean predicted standard deviation from the uncertainty head.
    pub uncertainty: f64,
    /// (edges, nodes) per frame.
    pub frame_topology: Vec<(usize, usize)>,
}

pub fn aggregate_metrics(evals: &[SequenceEval]) -> MetricsReport {
    let labels: Vec<usize> = evals.iter().map(|e| e.label).collect();
    let preds: Vec<usize> = evals.iter().map(|e| e.pred).collect();
    let scores: Vec<f64> = evals.iter().map(|e| e.score).collect();

    let mut degrees = Vec::new();
    let mut edge_counts = Vec::new();
    for e in evals {
        for &(edges, nodes) in &e.frame_topology {
            if nodes > 0 {
                degrees.push(edges as f64 / nodes as f64);
            }
            edge_counts.push(edges as f64);
        }
    }
    let (avg_degree, _) = mean_std(&degrees);
    let (avg_edges, std_edges) = mean_std(&edge_counts);

    let u_cor: Vec<f64> = evals
        .iter()
        .filter(|e| e.pred == e.label)
        .map(|e| e.uncertainty)
        .collect();
    let u_wro: Vec<f64> = evals
        .iter()
        .filter(|e| e.pred != e.label)
        .map(|e| e.uncertainty)
        .collect();

    let mut class_counts = [0usize; 2];
    for &y in &labels {
        class_counts[y.min(1)] += 1;
    }

    MetricsReport {
        num_samples: evals.len(),
        acc: accuracy(&preds, &labels),
        auc: auc(&scores, &labels),
        mcc: mcc(&preds, &labels),
        avg_degree,
        avg_edges_per_frame: avg_edges,
        std_edges_per_frame: std_edges,
        u_cor_mean: (!u_cor.is_empty()).then(|| mean_std(&u_cor).0),
        u_wro_mean: (!u_wro.is_empty()).then(|| mean_std(&u_wro).0),
        class_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn perfect_separation_gives_unit_auc_and_mcc() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        let preds = [0, 0, 1, 1];
        assert_eq!(auc(&scores, &labels), 1.0);
        assert_eq!(mcc(&preds, &labels), 1.0);
        assert_eq!(accuracy(&preds, &labels), 1.0);
    }

    #[test]
    fn mcc_confusion_hand_case() {
        // TP=2, TN=3, FP=1, FN=1 gives (6-1)/sqrt(3*3*4*4) = 5/12.
        let labels = [1, 1, 1, 0, 0, 0, 0];
        let preds = [1, 1, 0, 1, 0, 0, 0];
        assert!((mcc(&preds, &labels) - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(auc(&[0.3, 0.7], &[1, 1]), 0.5);
        assert_eq!(mcc(&[1, 1], &[1, 1]), 0.0);
        assert_eq!(accuracy(&[], &[]), 0.0);
    }

    #[test]
    fn tied_scores_count_half() {
        // One positive and one negative share a score: AUC = 0.5.
        assert_eq!(auc(&[0.4, 0.4], &[0, 1]), 0.5);
        // Positive tied with one of two negatives: pairs contribute 1 + 0.5.
        assert!((auc(&[0.1, 0.4, 0.4], &[0, 0, 1]) - 0.75).abs() < 1e-15);
    }

    fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn brute_force_mcc(preds: &[usize], labels: &[usize]) -> f64 {
        let count = |p: usize, y: usize| {
            preds
                .iter()
                .zip(labels)
                .filter(|(a, b)| **a == p && **b == y)
                .count() as f64
        };
        let (tp, tn, fp, fne) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
        let d = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
        if d == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fne) / d
        }
    }

    #[test]
    fn oracles_agree_on_random_instances() {
        let mut rng = rng_from(42);
        for _ in 0..1000 {
            let n = rng.gen_range(2..30);
            // Coarse scores force frequent ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let preds: Vec<usize> = scores.iter().map(|s| usize::from(*s > 0.5)).collect();
            let n_pos = labels.iter().filter(|&&y| y == 1).count();
            if n_pos > 0 && n_pos < n {
                assert!((auc(&scores, &labels) - brute_force_auc(&scores, &labels)).abs() < 1e-12);
            }
            assert!((mcc(&preds, &labels) - brute_force_mcc(&preds, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_report_hand_case() {
        let evals = vec![
            SequenceEval {
                label: 1,
                pred: 1,
                score: 0.9,
                uncertainty: 0.2,
                frame_topology: vec![(6, 3), (2, 2)],
            },
            SequenceEval {
                label: 0,
                pred: 1,
                score: 0.7,
                uncertainty: 0.8,
                frame_topology: vec![(4, 4)],
            },
        ];
        let r = aggregate_metrics(&evals);
        assert_eq!(r.num_samples, 2);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.class_counts, [1, 1]);
        assert!((r.avg_degree - (2.0 + 1.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((r.avg_edges_per_frame - 4.0).abs() < 1e-15);
        assert_eq!(r.u_cor_mean, Some(0.2));
        assert_eq!(r.u_wro_mean, Some(0.8));
    }

    #[test]
    fn empty_subsets_serialize_as_null() {
        let evals = vec![SequenceEval {
            label: 0,
            pred: 0,
            score: 0.1,
            uncertainty: 0.4,
            frame_topology: vec![(2, 2)],
        }];
        let r = aggregate_metrics(&evals);
        assert_eq!(r.u_wro_mean, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"u_wro_mean\":null"));
    }
}
