//! Frame-level average precision.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("average precision is undefined without positive labels")]
    NoPositives,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {index}")]
    NonFiniteScore { index: usize },
}

/// Ranking order: descending score, ties broken by original index.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Uninterpolated average precision: mean over positives of the precision
/// at that positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let order = ranking_order(scores);
    let mut tp = 0usize;
    let mut sum_precision = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            sum_precision += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum_precision / n_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Independent oracle: walk the full precision-recall curve rank by
    /// rank and integrate precision over the recall increments, normalizing
    /// at the end so each positive contributes an exact unit step.
    fn pr_integration_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let order = ranking_order(scores);
        let n_pos = labels.iter().filter(|&&l| l).count();
        let mut tp_prev = 0usize;
        let mut tp = 0usize;
        let mut area = 0.0;
        for (rank0, &idx) in order.iter().enumerate() {
            if labels[idx] {
                tp += 1;
            }
            let precision = tp as f64 / (rank0 + 1) as f64;
            let delta_tp = (tp - tp_prev) as f64;
            area += delta_tp * precision;
            tp_prev = tp;
        }
        area / n_pos as f64
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn worked_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        let ap = average_precision(&[0.2, 0.9], &[true, false]).unwrap();
        assert_eq!(ap, 0.5, "single positive ranked 2nd of 2");
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(matches!(
            average_precision(&[0.5, 0.1], &[false, false]),
            Err(MetricsError::NoPositives)
        ));
    }

    #[test]
    fn ties_break_by_original_index() {
        // Equal scores: earlier index ranks first.
        let scores = [0.5, 0.5, 0.5];
        let labels = [false, true, false];
        // Order is [0, 1, 2]; the positive sits at rank 2.
        let ap = average_precision(&scores, &labels).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn agrees_exactly_with_pr_integration_on_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.gen_range(1..=20);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Quantized scores provoke plenty of ties.
                    (rng.gen_range(0..8) as f64) / 8.0
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if !labels.iter().any(|&l| l) {
                continue;
            }
            checked += 1;
            let ap = average_precision(&scores, &labels).unwrap();
            let oracle = pr_integration_oracle(&scores, &labels);
            assert_eq!(ap, oracle, "scores {scores:?} labels {labels:?}");
            assert!((0.0..=1.0).contains(&ap));
        }
    }
}
