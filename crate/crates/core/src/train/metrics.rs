/// Fraction of bags whose `p >= 0.5` prediction matches the label.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> Option<f64> {
    if probs.is_empty() {
        return None;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Some(hits as f64 / probs.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counted one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (pairs > 0).then(|| total / pairs as f64)
    }

    #[test]
    fn examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
        assert_eq!(
            brute_force_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]),
            Some(0.75)
        );
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]), Some(0.5));
        assert_eq!(auc(&[1.0, 1.0, 0.0], &[1, 1, 0]), Some(1.0));
        assert_eq!(accuracy(&[1.0, 1.0, 0.0], &[1, 1, 0]), Some(1.0));
        assert_eq!(auc(&[0.2, 0.3], &[1, 1]), None);
        assert_eq!(accuracy(&[], &[]), None);
        assert_eq!(accuracy(&[0.5, 0.49], &[1, 1]), Some(0.5));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pair_count(
            data in prop::collection::vec((0u8..6, 0u8..2), 1..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|&(_, y)| y).collect();
            let a = auc(&scores, &labels);
            let b = brute_force_auc(&scores, &labels);
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
