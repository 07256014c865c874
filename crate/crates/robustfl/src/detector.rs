//! Anomaly detection over client updates: difference scores against the
//! forecast, an exact 1-D 2-means split of the scores, and benign/malicious
//! verdicts with precision/recall bookkeeping.

use std::collections::BTreeSet;

use crate::aggregation::ClientUpdate;
use crate::error::{Error, Result};
use crate::param::{l2_distance, ParamVector};

/// Per-round detection outcome: the raw scores (in input order), the two
/// cluster centroids with `sc <= lc`, and the resulting verdicts. The two
/// id sets partition the reporting clients, and the benign set is never
/// empty while any client reported.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<(usize, f64)>,
    pub sc: f64,
    pub lc: f64,
    pub benign_ids: BTreeSet<usize>,
    pub malicious_ids: BTreeSet<usize>,
}

/// Distance of every upload from the forecast, preserving input order.
pub fn score_updates(
    updates: &[ClientUpdate],
    forecast: &ParamVector,
) -> Result<Vec<(usize, f64)>> {
    updates
        .iter()
        .map(|u| Ok((u.client_id, l2_distance(&u.params, forecast)?)))
        .collect()
}

/// Exact 2-means of scalar scores: the optimal 1-D 2-clustering is always a
/// threshold split of the sorted values, so every split is scanned and the
/// minimum within-cluster sum of squares wins (ties: smallest split).
/// Returns centroids `(sc, lc)` with `sc <= lc`; all-equal input collapses
/// to `sc == lc`. The seed is accepted for interface stability but the
/// solver is deterministic and ignores it.
pub fn kmeans2_1d(scores: &[f64], _seed: u64) -> (f64, f64) {
    assert!(!scores.is_empty(), "kmeans2_1d needs at least one score");
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let n = sorted.len();
    let mean_of = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if n == 1 {
        return (sorted[0], sorted[0]);
    }

    // prefix sums make each split's cost O(1): wcss = sumsq - sum^2/len
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
        prefix_sq.push(prefix_sq.last().unwrap() + v * v);
    }
    let wcss = |i: usize, j: usize| -> f64 {
        let len = (j - i) as f64;
        let sum = prefix[j] - prefix[i];
        (prefix_sq[j] - prefix_sq[i]) - sum * sum / len
    };

    let mut best_k = 1;
    let mut best_cost = f64::INFINITY;
    for k in 1..n {
        let cost = wcss(0, k) + wcss(k, n);
        if cost < best_cost {
            best_cost = cost;
            best_k = k;
        }
    }
    (mean_of(&sorted[..best_k]), mean_of(&sorted[best_k..]))
}

/// Applies the verdict rule: a client is benign iff its score is strictly
/// closer to `sc` than to `lc`; equidistant scores count as malicious. A
/// degenerate clustering (`sc == lc`) flags nobody.
pub fn select_benign(scores: &[(usize, f64)], sc: f64, lc: f64) -> ScoreReport {
    assert!(sc <= lc, "centroids must satisfy sc <= lc");
    let mut benign_ids = BTreeSet::new();
    let mut malicious_ids = BTreeSet::new();
    for &(id, score) in scores {
        if sc == lc || (score - sc).abs() < (score - lc).abs() {
            benign_ids.insert(id);
        } else {
            malicious_ids.insert(id);
        }
    }
    ScoreReport {
        scores: scores.to_vec(),
        sc,
        lc,
        benign_ids,
        malicious_ids,
    }
}

/// A two-cluster split of an all-honest population must leave most of the
/// score variance inside the clusters: splitting one homogeneous cloud in
/// half keeps roughly a third of it, while a genuine benign/malicious gap
/// leaves almost none. Below this share of retained variance the split
/// counts as a real separation. Scores are distances, so the variance is
/// measured on the log scale, where their spread is additive.
pub const SPLIT_VARIANCE_THRESHOLD: f64 = 0.15;

/// Whether the scores carry a real two-group separation signal: true iff
/// the best threshold split of the log scores leaves at most
/// [`SPLIT_VARIANCE_THRESHOLD`] of their total sum of squares within the
/// clusters. All-equal or single-score inputs carry no signal and return
/// false. The `(sc, lc)` centroids mark a degenerate clustering; the split
/// itself is re-derived on the log scale.
pub fn split_is_significant(scores: &[f64], sc: f64, lc: f64) -> bool {
    if scores.len() < 2 || sc == lc {
        return false;
    }
    let max = scores.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return false;
    }
    let floor = max * 1e-12;
    let mut logs: Vec<f64> = scores.iter().map(|&s| s.max(floor).ln()).collect();
    logs.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));

    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let tss: f64 = logs.iter().map(|&x| (x - mean) * (x - mean)).sum();
    if tss == 0.0 {
        return false;
    }
    let wcss_of = |part: &[f64]| -> f64 {
        let m = part.iter().sum::<f64>() / part.len() as f64;
        part.iter().map(|&x| (x - m) * (x - m)).sum()
    };
    let mut best = f64::INFINITY;
    for k in 1..logs.len() {
        let cost = wcss_of(&logs[..k]) + wcss_of(&logs[k..]);
        if cost < best {
            best = cost;
        }
    }
    best <= SPLIT_VARIANCE_THRESHOLD * tss
}

/// Precision, recall, and F1 of a flagged set against ground truth.
/// Conventions: precision is 1 when nothing is flagged, recall is 1 when
/// the ground truth is empty, and F1 is 0 when both are 0.
pub fn precision_recall_f1(
    flagged: &BTreeSet<usize>,
    ground_truth_malicious: &BTreeSet<usize>,
) -> (f64, f64, f64) {
    let tp = flagged.intersection(ground_truth_malicious).count() as f64;
    let precision = if flagged.is_empty() {
        1.0
    } else {
        tp / flagged.len() as f64
    };
    let recall = if ground_truth_malicious.is_empty() {
        1.0
    } else {
        tp / ground_truth_malicious.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// [`precision_recall_f1`] of a report's verdicts, after checking that the
/// ground truth only names clients that actually reported.
pub fn detection_metrics(
    report: &ScoreReport,
    ground_truth_malicious: &BTreeSet<usize>,
) -> Result<(f64, f64, f64)> {
    let known: BTreeSet<usize> = report.scores.iter().map(|&(id, _)| id).collect();
    for &id in ground_truth_malicious {
        if !known.contains(&id) {
            return Err(Error::UnknownClientId(id));
        }
    }
    Ok(precision_recall_f1(
        &report.malicious_ids,
        ground_truth_malicious,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::ClientUpdate;

    fn update(id: usize, v: &[f64]) -> ClientUpdate {
        ClientUpdate::new(id, ParamVector::new(v.to_vec()).unwrap(), 1).unwrap()
    }

    #[test]
    fn scores_are_distances_in_input_order() {
        let forecast = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let updates = vec![update(7, &[3.0, 4.0]), update(2, &[0.0, 0.0])];
        let scores = score_updates(&updates, &forecast).unwrap();
        assert_eq!(scores, vec![(7, 5.0), (2, 0.0)]);

        let permuted = vec![updates[1].clone(), updates[0].clone()];
        let scores_p = score_updates(&permuted, &forecast).unwrap();
        assert_eq!(scores_p, vec![(2, 0.0), (7, 5.0)]);
    }

    #[test]
    fn score_zero_for_update_equal_to_forecast() {
        let forecast = ParamVector::new(vec![1.5, -2.0]).unwrap();
        let updates = vec![update(0, &[1.5, -2.0])];
        assert_eq!(score_updates(&updates, &forecast).unwrap()[0].1, 0.0);
    }

    #[test]
    fn kmeans_all_equal_collapses() {
        let (sc, lc) = kmeans2_1d(&[0.4, 0.4, 0.4], 0);
        assert_eq!((sc, lc), (0.4, 0.4));
        let (sc, lc) = kmeans2_1d(&[2.5], 99);
        assert_eq!((sc, lc), (2.5, 2.5));
    }

    #[test]
    fn kmeans_hand_evaluated() {
        let (sc, lc) = kmeans2_1d(&[0.1, 0.12, 0.9, 1.0], 0);
        assert!((sc - 0.11).abs() < 1e-12);
        assert!((lc - 0.95).abs() < 1e-12);

        let (sc, lc) = kmeans2_1d(&[0.0, 0.0, 10.0], 0);
        assert_eq!((sc, lc), (0.0, 10.0));
    }

    #[test]
    fn kmeans_is_order_insensitive() {
        let (a, b) = kmeans2_1d(&[1.0, 9.0, 1.1, 8.8, 0.9], 0);
        let (c, d) = kmeans2_1d(&[9.0, 0.9, 8.8, 1.0, 1.1], 0);
        assert_eq!((a, b), (c, d));
    }

    /// Exhaustive-threshold oracle: compute each split's cost with the
    /// two-pass formula and require the same centroids.
    #[test]
    fn kmeans_matches_threshold_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for case in 0..300 {
            let n = rng.gen_range(1..=64);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let got = kmeans2_1d(&scores, 0);
            let want = oracle_kmeans(&scores);
            assert_eq!(got, want, "case {case} with {n} scores");
        }
    }

    fn oracle_kmeans(scores: &[f64]) -> (f64, f64) {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mean_of = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        if n == 1 {
            return (sorted[0], sorted[0]);
        }
        let wcss = |s: &[f64]| {
            let m = mean_of(s);
            s.iter().map(|&x| (x - m) * (x - m)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 1);
        for k in 1..n {
            let cost = wcss(&sorted[..k]) + wcss(&sorted[k..]);
            if cost < best.0 {
                best = (cost, k);
            }
        }
        (mean_of(&sorted[..best.1]), mean_of(&sorted[best.1..]))
    }

    #[test]
    fn select_benign_rule() {
        let scores = vec![(0, 0.12)];
        let report = select_benign(&scores, 0.11, 0.95);
        assert!(report.benign_ids.contains(&0));

        // exactly equidistant -> malicious (strict inequality)
        let scores = vec![(4, 1.0)];
        let report = select_benign(&scores, 0.0, 2.0);
        assert!(report.malicious_ids.contains(&4));

        // degenerate centroids -> everyone benign
        let scores = vec![(0, 3.0), (1, 3.0)];
        let report = select_benign(&scores, 3.0, 3.0);
        assert_eq!(report.benign_ids.len(), 2);
        assert!(report.malicious_ids.is_empty());
    }

    #[test]
    fn select_benign_is_monotone_in_score() {
        let scores: Vec<(usize, f64)> = (0..20).map(|i| (i, i as f64 * 0.3)).collect();
        let (sc, lc) = kmeans2_1d(&scores.iter().map(|&(_, s)| s).collect::<Vec<_>>(), 0);
        let report = select_benign(&scores, sc, lc);
        let mut seen_malicious = false;
        for &(id, _) in &scores {
            if report.malicious_ids.contains(&id) {
                seen_malicious = true;
            } else {
                assert!(!seen_malicious, "benign client {id} after a malicious one");
            }
        }
    }

    #[test]
    fn verdicts_partition_clients() {
        let scores = vec![(0, 0.1), (1, 5.0), (2, 0.2), (3, 4.9)];
        let (sc, lc) = kmeans2_1d(&[0.1, 5.0, 0.2, 4.9], 0);
        let report = select_benign(&scores, sc, lc);
        assert_eq!(report.benign_ids.len() + report.malicious_ids.len(), 4);
        assert!(report.benign_ids.is_disjoint(&report.malicious_ids));
        assert_eq!(report.benign_ids, BTreeSet::from([0, 2]));
        assert_eq!(report.malicious_ids, BTreeSet::from([1, 3]));
    }

    /// Well-separated groups (far >= 3x near) are flagged exactly, even
    /// when the attackers are the majority.
    #[test]
    fn separated_groups_are_detected_exactly() {
        let forecast = ParamVector::new(vec![0.0; 4]).unwrap();
        let mut updates = Vec::new();
        // 3 honest near the forecast, 7 malicious far away
        for id in 0..3 {
            updates.push(update(id, &[0.02 * (id + 1) as f64, 0.0, 0.0, 0.0]));
        }
        for id in 3..10 {
            updates.push(update(id, &[10.0 + id as f64, 0.0, 0.0, 0.0]));
        }
        let scores = score_updates(&updates, &forecast).unwrap();
        let values: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
        let (sc, lc) = kmeans2_1d(&values, 0);
        let report = select_benign(&scores, sc, lc);
        assert_eq!(report.benign_ids, BTreeSet::from([0, 1, 2]));
        assert_eq!(report.malicious_ids, (3..10).collect::<BTreeSet<_>>());
    }

    #[test]
    fn split_significance() {
        // two tight groups far apart: the split explains nearly everything
        let scores = [0.1, 0.11, 0.12, 5.0, 5.1, 5.2];
        let (sc, lc) = kmeans2_1d(&scores, 0);
        assert!(split_is_significant(&scores, sc, lc));

        // one homogeneous cloud: the best split still leaves most variance
        let cloud = [1.0, 1.02, 0.98, 1.05, 0.95, 1.01, 0.99, 1.03, 0.97, 1.0];
        let (sc, lc) = kmeans2_1d(&cloud, 0);
        assert!(!split_is_significant(&cloud, sc, lc));

        // no-signal degenerate inputs
        assert!(!split_is_significant(&[3.0, 3.0, 3.0], 3.0, 3.0));
        assert!(!split_is_significant(&[2.0], 2.0, 2.0));
    }

    #[test]
    fn metrics_conventions() {
        let scores = vec![(3, 9.0), (5, 9.5), (1, 0.1)];
        let report = select_benign(&scores, 0.1, 9.25);
        // flagged == truth == {3, 5}
        let truth = BTreeSet::from([3, 5]);
        assert_eq!(report.malicious_ids, truth);
        assert_eq!(detection_metrics(&report, &truth).unwrap(), (1.0, 1.0, 1.0));

        // flagged {3}, truth {3, 5}
        let report = ScoreReport {
            scores: scores.clone(),
            sc: 0.0,
            lc: 1.0,
            benign_ids: BTreeSet::from([5, 1]),
            malicious_ids: BTreeSet::from([3]),
        };
        let (p, r, f1) = detection_metrics(&report, &truth).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        // flagged empty, truth empty
        let report = ScoreReport {
            scores,
            sc: 0.0,
            lc: 0.0,
            benign_ids: BTreeSet::from([1, 3, 5]),
            malicious_ids: BTreeSet::new(),
        };
        assert_eq!(
            detection_metrics(&report, &BTreeSet::new()).unwrap(),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn metrics_reject_unknown_ids() {
        let report = select_benign(&[(0, 0.0), (1, 5.0)], 0.0, 5.0);
        let err = detection_metrics(&report, &BTreeSet::from([9])).unwrap_err();
        assert!(matches!(err, Error::UnknownClientId(9)));
    }
}
